//! Per-tile bit-width maps rendered with a blue → yellow → red ramp.

use alloc::format;
use alloc::vec::Vec;

use crate::cost::CostLedger;
use crate::tiling::TilePlan;
use crate::{Error, Result};

/// Mean chosen bit of each tile, in plan order.
pub fn cell_values(ledger: &CostLedger, plan: &TilePlan) -> Result<Vec<f64>> {
    let means = ledger.mean_bit_by_patch();
    (0..plan.len())
        .map(|i| means.get(&i).copied().ok_or_else(|| Error::Contract(format!("ledger has no entries for tile {i}"))))
        .collect()
}

/// Colour of `v` on a ramp from blue at `lo` through yellow to red at `hi`.
pub fn ramp(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 };
    let to_u8 = |x: f64| libm::round(x * 255.0) as u8;
    if t < 0.5 {
        let u = t * 2.0;
        [to_u8(u), to_u8(u), to_u8(1.0 - u)]
    } else {
        let u = (t - 0.5) * 2.0;
        [255, to_u8(1.0 - u), 0]
    }
}

/// RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// One `cell × cell` block per tile, laid out on the plan's grid.
pub fn render(ledger: &CostLedger, plan: &TilePlan, lo: f64, hi: f64, cell: usize) -> Result<Heatmap> {
    let values = cell_values(ledger, plan)?;
    let cell = cell.max(1);
    let (width, height) = (plan.cols() * cell, plan.rows() * cell);
    let mut rgb = alloc::vec![0u8; width * height * 3];
    for (tile, v) in plan.tiles.iter().zip(&values) {
        let c = ramp(*v, lo, hi);
        for y in tile.row * cell..(tile.row + 1) * cell {
            for x in tile.col * cell..(tile.col + 1) * cell {
                let i = (y * width + x) * 3;
                rgb[i..i + 3].copy_from_slice(&c);
            }
        }
    }
    Ok(Heatmap { width, height, rgb })
}
