//! Whole-image inference by tiles, and per-image quality/cost reports.

use alloc::format;
use alloc::vec::Vec;

use crate::cost::CostLedger;
use crate::metrics::{psnr_y, ssim_y};
use crate::network::SrNetwork;
use crate::selector::patch_gradient;
use crate::tiling::{extract_tiles, merge_tiles, plan_tiles, TilePlan};
use crate::{Error, Result, Tensor};

/// Super-resolved image with its per-tile ledger (patch id = tile index).
#[derive(Debug, Clone, PartialEq)]
pub struct Tiled {
    pub sr: Tensor,
    pub ledger: CostLedger,
    pub plan: TilePlan,
}

/// Merges per-tile outputs given in plan order.
pub fn assemble(plan: TilePlan, outputs: Vec<(Tensor, CostLedger)>, r: usize) -> Result<Tiled> {
    if outputs.len() != plan.len() {
        return Err(Error::Contract(format!("{} tile outputs for a plan of {}", outputs.len(), plan.len())));
    }
    let mut ledger = CostLedger::new();
    let mut tiles = Vec::with_capacity(outputs.len());
    for (i, (sr, l)) in outputs.into_iter().enumerate() {
        ledger.absorb(l, i);
        tiles.push(sr);
    }
    ledger.sort();
    let sr = merge_tiles(&tiles, &plan, r)?;
    Ok(Tiled { sr, ledger, plan })
}

/// Tiles `lr` ((1, 3, H, W), pixel units) and runs `net` on each tile in
/// order.
pub fn super_resolve(net: &SrNetwork, lr: &Tensor, tile: usize, overlap: usize) -> Result<Tiled> {
    let s = lr.shape();
    let plan = plan_tiles(s.w, s.h, tile, overlap)?;
    let outputs = extract_tiles(lr, &plan)?.iter().map(|t| net.infer(t)).collect::<Result<Vec<_>>>()?;
    assemble(plan, outputs, net.cfg.scale)
}

/// Quality and cost of one evaluated image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub fqr: f64,
    pub bitops_g: f64,
    pub n_tiles: usize,
}

pub fn report(tiled: &Tiled, hr: &Tensor) -> Result<ImageReport> {
    Ok(ImageReport {
        psnr_db: psnr_y(&tiled.sr, hr)?,
        ssim: ssim_y(&tiled.sr, hr)?,
        fqr: tiled.ledger.fqr()?,
        bitops_g: tiled.ledger.bitops_g()?,
        n_tiles: tiled.plan.len(),
    })
}

/// Variance, over the non-overlapping `p × p` patches of `image`
/// ((1, C, H, W), pixel units), of the patch mean gradient magnitude
/// measured on `[0, 1]` luminance. Border remainders narrower than `p` are
/// dropped.
pub fn gradient_variance(image: &Tensor, p: usize) -> Result<f64> {
    let s = image.shape();
    if p < 2 || s.h < p || s.w < p {
        return Err(Error::Config(format!("patch size {p} does not fit a {}x{} image", s.h, s.w)));
    }
    let mut mags = Vec::new();
    for y in (0..=s.h - p).step_by(p) {
        for x in (0..=s.w - p).step_by(p) {
            let g = patch_gradient(&image.crop(y, x, p, p)?, 0)?;
            mags.push((g[0] as f64 + g[1] as f64) / 255.0);
        }
    }
    let n = mags.len() as f64;
    let mean = mags.iter().sum::<f64>() / n;
    Ok(mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n)
}
