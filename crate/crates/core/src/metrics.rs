//! PSNR and SSIM.
//!
//! Reported numbers use the usual super-resolution convention: both images
//! are rounded to 8-bit, converted to luma and compared at peak 255.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::exp64;
use crate::{Error, Result, Tensor};

/// `10 · log10(peak² / MSE)`, `+∞` for identical inputs.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!("psnr of {} and {} values", a.len(), b.len())));
    }
    if !(peak > 0.0) {
        return Err(Error::Parameter(format!("peak must be positive, got {peak}")));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(peak * peak / mse))
}

/// Rounds to the nearest 8-bit level.
pub fn quantize_u8(v: f32) -> f32 {
    libm::roundf(v.clamp(0.0, 255.0))
}

/// Luma (ITU-R BT.601, studio swing) of sample 0 of an RGB image after
/// rounding to 8-bit.
pub fn luma_u8(img: &Tensor) -> Result<Vec<f32>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::Dimension(format!("luma needs 3 channels, got {s}")));
    }
    let (r, g, b) = (img.plane(0, 0), img.plane(0, 1), img.plane(0, 2));
    Ok((0..s.plane())
        .map(|i| {
            let (r, g, b) = (quantize_u8(r[i]) as f64, quantize_u8(g[i]) as f64, quantize_u8(b[i]) as f64);
            (16.0 + (65.738 * r + 129.057 * g + 25.064 * b) / 256.0) as f32
        })
        .collect())
}

/// PSNR between the luma of two RGB images.
pub fn psnr_y(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    if sr.shape() != hr.shape() {
        return Err(Error::Dimension(format!("psnr of {} and {}", sr.shape(), hr.shape())));
    }
    psnr(&luma_u8(sr)?, &luma_u8(hr)?, 255.0)
}

/// SSIM between the luma of two RGB images.
pub fn ssim_y(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    if sr.shape() != hr.shape() {
        return Err(Error::Dimension(format!("ssim of {} and {}", sr.shape(), hr.shape())));
    }
    let s = sr.shape();
    ssim(&luma_u8(sr)?, &luma_u8(hr)?, s.h, s.w, 255.0)
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; WIN] {
    let mut g = [0f64; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = exp64(-d * d / (2.0 * SIGMA * SIGMA));
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; WIN]) -> Vec<f64> {
    let (oh, ow) = (h - WIN + 1, w - WIN + 1);
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WIN).map(|k| g[k] * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) evaluated where
/// the window fits inside the image, stabilizers `(0.01 L)²`, `(0.03 L)²`.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, peak: f64) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Dimension(format!("ssim planes of {} and {} values for {h}x{w}", a.len(), b.len())));
    }
    if h < WIN || w < WIN {
        return Err(Error::Dimension(format!("ssim needs at least {WIN}x{WIN} pixels, got {h}x{w}")));
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let g = gaussian_window();
    let a: Vec<f64> = a.iter().map(|v| *v as f64).collect();
    let b: Vec<f64> = b.iter().map(|v| *v as f64).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let (mu_a, mu_b) = (filter_valid(&a, h, w, &g), filter_valid(&b, h, w, &g));
    let (s_aa, s_bb, s_ab) = (filter_valid(&aa, h, w, &g), filter_valid(&bb, h, w, &g), filter_valid(&ab, h, w, &g));
    let mut total = 0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}
