//! Images, degradation, the bicubic baseline, synthetic training images and
//! paired patch sampling.
//!
//! Images are (1, 3, H, W) tensors with intensities in `[0, 255]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Shape, Tensor};

pub const PIXEL_MAX: f32 = 255.0;

/// BT.601 luma of batch sample `n`; single-channel tensors are returned
/// as-is and other channel counts are averaged.
pub fn luminance_plane(t: &Tensor, n: usize) -> Vec<f32> {
    let s = t.shape();
    match s.c {
        1 => t.plane(n, 0).to_vec(),
        3 => {
            let (r, g, b) = (t.plane(n, 0), t.plane(n, 1), t.plane(n, 2));
            r.iter().zip(g).zip(b).map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
        }
        c => {
            let mut out = vec![0f32; s.plane()];
            for ch in 0..c {
                out.iter_mut().zip(t.plane(n, ch)).for_each(|(o, v)| *o += v / c as f32);
            }
            out
        }
    }
}

/// Averages non-overlapping `r × r` blocks. Trailing rows/columns that do
/// not fill a block are dropped.
pub fn box_downsample(hr: &Tensor, r: usize) -> Result<Tensor> {
    let s = hr.shape();
    if r == 0 || s.h < r || s.w < r {
        return Err(Error::Dimension(format!("cannot downsample {s} by {r}")));
    }
    let (h, w) = (s.h / r, s.w / r);
    let os = Shape::new(s.n, s.c, h, w);
    let mut out = Vec::with_capacity(os.numel());
    let inv = 1.0 / (r * r) as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let p = hr.plane(n, c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0f64;
                    for dy in 0..r {
                        for dx in 0..r {
                            acc += p[(y * r + dy) * s.w + x * r + dx] as f64;
                        }
                    }
                    out.push((acc * inv) as f32);
                }
            }
        }
    }
    Tensor::from_vec(os, out)
}

fn cubic(t: f64) -> f64 {
    // Keys kernel, a = -0.5
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn bicubic_taps(len_in: usize, r: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..len_in * r)
        .map(|o| {
            let u = (o as f64 + 0.5) / r as f64 - 0.5;
            let base = libm::floor(u);
            let mut idx = [0usize; 4];
            let mut wts = [0f64; 4];
            for k in 0..4 {
                let p = base as i64 - 1 + k as i64;
                idx[k] = p.clamp(0, len_in as i64 - 1) as usize;
                wts[k] = cubic(u - p as f64);
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic upscaling by an integer factor, clamped to `[0, 255]`. Used as
/// the classical baseline the learned models are compared against.
pub fn bicubic_upscale(lr: &Tensor, r: usize) -> Result<Tensor> {
    let s = lr.shape();
    if r == 0 {
        return Err(Error::Parameter("scale must be at least 1".into()));
    }
    let (ho, wo) = (s.h * r, s.w * r);
    let tx = bicubic_taps(s.w, r);
    let ty = bicubic_taps(s.h, r);
    let os = Shape::new(s.n, s.c, ho, wo);
    let mut out = Vec::with_capacity(os.numel());
    let mut tmp = vec![0f64; s.h * wo];
    for n in 0..s.n {
        for c in 0..s.c {
            let p = lr.plane(n, c);
            for y in 0..s.h {
                for (x, (idx, wts)) in tx.iter().enumerate() {
                    tmp[y * wo + x] = (0..4).map(|k| wts[k] * p[y * s.w + idx[k]] as f64).sum();
                }
            }
            for (idx, wts) in &ty {
                for x in 0..wo {
                    let v: f64 = (0..4).map(|k| wts[k] * tmp[idx[k] * wo + x]).sum();
                    out.push((v as f32).clamp(0.0, PIXEL_MAX));
                }
            }
        }
    }
    Tensor::from_vec(os, out)
}

/// Mirrors left-right and/or rotates by `quarter_turns × 90°`.
pub fn augment(t: &Tensor, flip: bool, quarter_turns: u8) -> Tensor {
    let mut cur = t.clone();
    cur.clear_grad();
    if flip {
        let s = cur.shape();
        let mut data = cur.data().to_vec();
        for row in data.chunks_mut(s.w) {
            row.reverse();
        }
        cur = Tensor::from_parts(s, data);
    }
    for _ in 0..quarter_turns % 4 {
        let s = cur.shape();
        let os = Shape::new(s.n, s.c, s.w, s.h);
        let mut data = vec![0f32; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        // (y, x) -> (x, h-1-y): clockwise
                        data[os.index(n, c, x, s.h - 1 - y)] = cur.at(n, c, y, x);
                    }
                }
            }
        }
        cur = Tensor::from_parts(os, data);
    }
    cur
}

/// Paired low/high resolution images.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub hr: Vec<Tensor>,
    pub lr: Vec<Tensor>,
    pub scale: usize,
}

impl PairedDataset {
    /// Crops every image to a multiple of `scale` and derives its
    /// low-resolution twin by box downsampling.
    pub fn from_hr(images: Vec<Tensor>, scale: usize) -> Result<Self> {
        let mut hr = Vec::with_capacity(images.len());
        let mut lr = Vec::with_capacity(images.len());
        for img in images {
            let s = img.shape();
            let (h, w) = (s.h / scale * scale, s.w / scale * scale);
            let cropped = img.crop(0, 0, h, w)?;
            lr.push(box_downsample(&cropped, scale)?);
            hr.push(cropped);
        }
        Ok(Self { hr, lr, scale })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    /// Draws `batch` random aligned patch pairs of low-resolution size
    /// `patch × patch`, with random flips and quarter turns when `augment`
    /// is set.
    pub fn sample_batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        patch: usize,
        do_augment: bool,
    ) -> Result<(Tensor, Tensor)> {
        if self.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let r = self.scale;
        let mut lrs = Vec::with_capacity(batch);
        let mut hrs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..self.len());
            let ls = self.lr[i].shape();
            if ls.h < patch || ls.w < patch {
                return Err(Error::Config(format!(
                    "image {i} ({}x{}) is smaller than the {patch}px training patch",
                    ls.h, ls.w
                )));
            }
            let y = rng.gen_range(0..=ls.h - patch);
            let x = rng.gen_range(0..=ls.w - patch);
            let mut l = self.lr[i].crop(y, x, patch, patch)?;
            let mut h = self.hr[i].crop(y * r, x * r, patch * r, patch * r)?;
            if do_augment {
                let flip = rng.gen_bool(0.5);
                let turns = rng.gen_range(0..4u8);
                l = augment(&l, flip, turns);
                h = augment(&h, flip, turns);
            }
            lrs.push(l);
            hrs.push(h);
        }
        Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
    }
}

/// Procedural training images: smooth colour ramps overlaid with flat
/// shapes, stripe and checker textures and noise patches, so that flat and
/// detailed regions both occur in every image.
pub fn synthetic_image(seed: u64, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 3, height, width);
    let mut img = vec![0f32; shape.numel()];
    let plane = height * width;

    let c0: [f32; 3] = core::array::from_fn(|_| rng.gen_range(30.0..220.0));
    let c1: [f32; 3] = core::array::from_fn(|_| rng.gen_range(30.0..220.0));
    let (dx, dy) = (rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0));
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 + 0.5 * (dx * x as f32 / width as f32 + dy * y as f32 / height as f32);
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * plane + y * width + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let n_shapes = rng.gen_range(3..7);
    for _ in 0..n_shapes {
        let kind = rng.gen_range(0..5u8);
        let h = rng.gen_range(height / 6..=height / 2).max(2);
        let w = rng.gen_range(width / 6..=width / 2).max(2);
        let y0 = rng.gen_range(0..height - h + 1);
        let x0 = rng.gen_range(0..width - w + 1);
        let col: [f32; 3] = core::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let col2: [f32; 3] = core::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let period = rng.gen_range(2..7usize);
        let angle = rng.gen_range(0..3u8);
        let amp = rng.gen_range(20.0f32..80.0);
        let (cy, cx) = (y0 as f32 + h as f32 / 2.0, x0 as f32 + w as f32 / 2.0);
        let (ry, rx) = (h as f32 / 2.0, w as f32 / 2.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let idx = y * width + x;
                let px: Option<[f32; 3]> = match kind {
                    // flat rectangle
                    0 => Some(col),
                    // flat ellipse
                    1 => {
                        let (u, v) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                        (u * u + v * v <= 1.0).then_some(col)
                    }
                    // stripes
                    2 => {
                        let k = match angle {
                            0 => x,
                            1 => y,
                            _ => x + y,
                        };
                        Some(if (k / period) % 2 == 0 { col } else { col2 })
                    }
                    // checkerboard
                    3 => Some(if ((x / period) + (y / period)) % 2 == 0 { col } else { col2 }),
                    // noise texture around a base colour
                    _ => {
                        let base = col;
                        Some(core::array::from_fn(|c| base[c] + rng.gen_range(-amp..amp)))
                    }
                };
                if let Some(p) = px {
                    for c in 0..3 {
                        img[c * plane + idx] = p[c].clamp(0.0, PIXEL_MAX);
                    }
                }
            }
        }
    }
    Tensor::from_parts(shape, img)
}

/// `count` synthetic images derived from `seed`.
pub fn synthetic_set(seed: u64, count: usize, height: usize, width: usize) -> Vec<Tensor> {
    (0..count as u64)
        .map(|i| synthetic_image(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i), height, width))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_downsample_averages_blocks() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 4), vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 8.0]).unwrap();
        let d = box_downsample(&t, 2).unwrap();
        assert_eq!(d.data(), &[4.0, 3.0]);
    }

    #[test]
    fn bicubic_keeps_constant_images() {
        let t = Tensor::full(Shape::new(1, 3, 5, 4), 77.0);
        let up = bicubic_upscale(&t, 2).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 3, 10, 8));
        assert!(up.data().iter().all(|v| (v - 77.0).abs() < 1e-4));
    }

    #[test]
    fn bicubic_reproduces_linear_ramps_in_the_interior() {
        let mut data = Vec::new();
        for _ in 0..6 {
            for x in 0..8 {
                data.push(10.0 * x as f32);
            }
        }
        let t = Tensor::from_vec(Shape::new(1, 1, 6, 8), data).unwrap();
        let up = bicubic_upscale(&t, 2).unwrap();
        for x in 4..12 {
            let expect = 10.0 * ((x as f32 + 0.5) / 2.0 - 0.5);
            assert!((up.at(0, 0, 5, x) - expect).abs() < 1e-3, "{x}: {}", up.at(0, 0, 5, x));
        }
    }

    #[test]
    fn augment_is_invertible() {
        let t = Tensor::from_vec(Shape::new(1, 2, 2, 3), (0..12).map(|v| v as f32).collect()).unwrap();
        let r = augment(&t, false, 1);
        assert_eq!(r.shape(), Shape::new(1, 2, 3, 2));
        assert_eq!(augment(&r, false, 3), t);
        assert_eq!(augment(&augment(&t, true, 0), true, 0), t);
    }

    #[test]
    fn synthetic_images_are_deterministic_and_in_range() {
        let a = synthetic_image(5, 32, 40);
        let b = synthetic_image(5, 32, 40);
        assert_eq!(a, b);
        assert_ne!(a, synthetic_image(6, 32, 40));
        assert!(a.data().iter().all(|v| (0.0..=PIXEL_MAX).contains(v)));
    }

    #[test]
    fn patch_pairs_are_aligned() {
        let imgs = synthetic_set(1, 2, 40, 40);
        let ds = PairedDataset::from_hr(imgs, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lr, hr) = ds.sample_batch(&mut rng, 3, 8, true).unwrap();
        assert_eq!(lr.shape(), Shape::new(3, 3, 8, 8));
        assert_eq!(hr.shape(), Shape::new(3, 3, 16, 16));
        let down = box_downsample(&hr, 2).unwrap();
        for (a, b) in down.data().iter().zip(lr.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        let empty = PairedDataset::from_hr(Vec::new(), 2).unwrap();
        assert!(matches!(empty.sample_batch(&mut rng, 1, 8, false), Err(Error::Config(_))));
    }
}
