//! PNG reading and writing in the `(1, 3, H, W)` pixel-unit layout.

use std::path::{Path, PathBuf};

use cadyq_core::heatmap::Heatmap;
use cadyq_core::metrics::quantize_u8;
use cadyq_core::{Shape, Tensor};
use image::{ImageReader, RgbImage};

use crate::{CliError, Result};

/// Loads any PNG as 8-bit RGB.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()
        .map_err(|e| CliError::Image { path: path.display().to_string(), source: e })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32;
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, 3, h, w), data)?)
}

/// Writes sample 0 of a 3-channel tensor, rounded and clamped to 8 bits.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.c != 3 {
        return Err(CliError::Core(cadyq_core::Error::Dimension(format!("PNG output needs 3 channels, got {s}"))));
    }
    let p = s.h * s.w;
    let d = t.sample(0);
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let i = y as usize * s.w + x as usize;
        image::Rgb([0, 1, 2].map(|c| quantize_u8(d[c * p + i]) as u8))
    });
    img.save(path).map_err(|e| CliError::Image { path: path.display().to_string(), source: e })
}

pub fn save_heatmap(path: &Path, h: &Heatmap) -> Result<()> {
    let img = RgbImage::from_raw(h.width as u32, h.height as u32, h.rgb.clone())
        .ok_or_else(|| CliError::Core(cadyq_core::Error::Contract("heatmap buffer size".into())))?;
    img.save(path).map_err(|e| CliError::Image { path: path.display().to_string(), source: e })
}

/// `*.png` files of a directory, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
