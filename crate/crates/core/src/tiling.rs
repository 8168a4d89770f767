//! Splitting a low-resolution image into overlapping tiles and stitching
//! the super-resolved tiles back together.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub row: usize,
    pub col: usize,
}

/// Tiles in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub overlap: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn stride(&self) -> usize {
        self.patch - self.overlap
    }

    pub fn rows(&self) -> usize {
        self.ys.len()
    }

    pub fn cols(&self) -> usize {
        self.xs.len()
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

fn axis_starts(len: usize, p: usize, stride: usize) -> Vec<usize> {
    if len <= p {
        return vec![0];
    }
    let mut out = vec![0];
    let mut pos = 0;
    while pos + p < len {
        pos += stride;
        if pos + p > len {
            pos = len - p;
        }
        out.push(pos);
    }
    out
}

/// Tiles of size `p` at stride `p − v`; the last tile on each axis is
/// shifted back to end on the border. Images smaller than `p` on an axis
/// get a single tile spanning that axis.
pub fn plan_tiles(width: usize, height: usize, p: usize, v: usize) -> Result<TilePlan> {
    if p <= v {
        return Err(Error::Config(format!("tile size {p} must exceed overlap {v}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Config(format!("cannot tile an empty {width}x{height} image")));
    }
    let stride = p - v;
    let xs = axis_starts(width, p, stride);
    let ys = axis_starts(height, p, stride);
    let (tw, th) = (p.min(width), p.min(height));
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            tiles.push(Tile { x, y, w: tw, h: th, row, col });
        }
    }
    Ok(TilePlan { width, height, patch: p, overlap: v, xs, ys, tiles })
}

/// Output-space boundaries between consecutive tiles on one axis: the
/// midpoint of each overlap, scaled by `r`.
fn cuts(starts: &[usize], extent: usize, len: usize, r: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(starts.len() + 1);
    out.push(0);
    for w in starts.windows(2) {
        out.push((w[0] + extent + w[1]) * r / 2);
    }
    out.push(len * r);
    out
}

/// Extracts the tiles of `plan` from an (1, C, H, W) image.
pub fn extract_tiles(image: &Tensor, plan: &TilePlan) -> Result<Vec<Tensor>> {
    let s = image.shape();
    if s.n != 1 || s.w != plan.width || s.h != plan.height {
        return Err(Error::Contract(format!("image {s} does not match a {}x{} plan", plan.width, plan.height)));
    }
    plan.tiles.iter().map(|t| image.crop(t.y, t.x, t.h, t.w)).collect()
}

/// Stitches super-resolved tiles: every output pixel is taken from the tile
/// whose centre is nearest along each axis, so each pixel is written once.
pub fn merge_tiles(sr_tiles: &[Tensor], plan: &TilePlan, r: usize) -> Result<Tensor> {
    if sr_tiles.len() != plan.len() {
        return Err(Error::Contract(format!("{} tiles for a plan of {}", sr_tiles.len(), plan.len())));
    }
    let c = sr_tiles.first().map_or(0, |t| t.shape().c);
    let (th, tw) = (plan.tiles[0].h, plan.tiles[0].w);
    for t in sr_tiles {
        let s = t.shape();
        if s != Shape::new(1, c, th * r, tw * r) {
            return Err(Error::Contract(format!("tile {s} is not ({}, {c}, {}, {})", 1, th * r, tw * r)));
        }
    }
    let xc = cuts(&plan.xs, tw, plan.width, r);
    let yc = cuts(&plan.ys, th, plan.height, r);
    let os = Shape::new(1, c, plan.height * r, plan.width * r);
    let mut out = vec![0f32; os.numel()];
    for (tile, sr) in plan.tiles.iter().zip(sr_tiles) {
        let (y0, y1) = (yc[tile.row], yc[tile.row + 1]);
        let (x0, x1) = (xc[tile.col], xc[tile.col + 1]);
        let (oy, ox) = (tile.y * r, tile.x * r);
        for ch in 0..c {
            let src = sr.plane(0, ch);
            let sw = tw * r;
            for y in y0..y1 {
                let d = os.index(0, ch, y, x0);
                let s0 = (y - oy) * sw + (x0 - ox);
                out[d..d + (x1 - x0)].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
            }
        }
    }
    Tensor::from_vec(os, out)
}
