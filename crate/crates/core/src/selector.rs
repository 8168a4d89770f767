//! Quantization-sensitivity features and the per-layer bit selector.
//!
//! The selector is a single fully connected layer from the sensitivity
//! features to one logit per candidate bit-width, followed by a softmax.
//! The forward pass takes the most probable bit-width (ties go to the lowest
//! bit); the backward pass uses the expected bit-width instead.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::softmax;
use crate::data::luminance_plane;
use crate::math::mean_std;
use crate::{Error, Result, Tensor};

/// Which statistics feed the selector. The default pairs the patch image
/// gradient with the per-channel standard deviation of the layer input; the
/// others are ablation alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SensitivityMeasure {
    #[default]
    GradientChannelStd,
    GradientLayerStd,
    StdLayerStd,
    MaxMin,
}

impl SensitivityMeasure {
    pub const ALL: [SensitivityMeasure; 4] = [
        SensitivityMeasure::GradientChannelStd,
        SensitivityMeasure::GradientLayerStd,
        SensitivityMeasure::StdLayerStd,
        SensitivityMeasure::MaxMin,
    ];

    /// Selector input width for a layer with `channels` input channels.
    pub fn input_dim(&self, channels: usize) -> usize {
        match self {
            SensitivityMeasure::GradientChannelStd => channels + 2,
            SensitivityMeasure::GradientLayerStd => 3,
            SensitivityMeasure::StdLayerStd | SensitivityMeasure::MaxMin => 2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SensitivityMeasure::GradientChannelStd => "gradient_channel_std",
            SensitivityMeasure::GradientLayerStd => "gradient_layer_std",
            SensitivityMeasure::StdLayerStd => "std_layer_std",
            SensitivityMeasure::MaxMin => "maxmin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sensitivity measure `{s}`")))
    }
}

/// Mean absolute forward difference of the patch luminance along the
/// horizontal and vertical axes, for batch sample `n`.
pub fn patch_gradient(patch: &Tensor, n: usize) -> Result<[f32; 2]> {
    let s = patch.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::Contract(format!("patch gradient needs at least 2x2 pixels, got {}x{}", s.h, s.w)));
    }
    let lum = luminance_plane(patch, n);
    let (h, w) = (s.h, s.w);
    let mut gx = 0f64;
    let mut gy = 0f64;
    for row in 0..h {
        let r = &lum[row * w..(row + 1) * w];
        for c in 0..w - 1 {
            gx += (r[c + 1] - r[c]).abs() as f64;
        }
        if row + 1 < h {
            let next = &lum[(row + 1) * w..(row + 2) * w];
            for c in 0..w {
                gy += (next[c] - r[c]).abs() as f64;
            }
        }
    }
    Ok([(gx / (h * (w - 1)) as f64) as f32, (gy / ((h - 1) * w) as f64) as f32])
}

/// Population standard deviation of each channel of batch sample `n`.
pub fn channel_std(x: &Tensor, n: usize) -> Vec<f32> {
    (0..x.shape().c).map(|c| mean_std(x.plane(n, c)).1 as f32).collect()
}

/// Per-patch statistics computed once on the low-resolution input and
/// shared by every layer's selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    pub grad_mag: [f32; 2],
    pub std: f32,
    pub range: f32,
}

impl PatchStats {
    pub fn of(patch: &Tensor, n: usize) -> Result<Self> {
        let grad_mag = patch_gradient(patch, n)?;
        let lum = luminance_plane(patch, n);
        let (_, std) = mean_std(&lum);
        let (lo, hi) = lum.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        Ok(Self { grad_mag, std: std as f32, range: hi - lo })
    }
}

/// Selector input for one (patch, layer) pair: layer statistics followed by
/// patch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityFeatures {
    pub layer: Vec<f32>,
    pub patch: Vec<f32>,
}

impl SensitivityFeatures {
    /// Computes the features of batch sample `n` of a layer input `x`.
    pub fn compute(measure: SensitivityMeasure, x: &Tensor, n: usize, patch: &PatchStats) -> Self {
        match measure {
            SensitivityMeasure::GradientChannelStd => {
                Self { layer: channel_std(x, n), patch: patch.grad_mag.to_vec() }
            }
            SensitivityMeasure::GradientLayerStd => {
                Self { layer: vec![mean_std(x.sample(n)).1 as f32], patch: patch.grad_mag.to_vec() }
            }
            SensitivityMeasure::StdLayerStd => {
                Self { layer: vec![mean_std(x.sample(n)).1 as f32], patch: vec![patch.std] }
            }
            SensitivityMeasure::MaxMin => {
                let s = x.sample(n);
                let (lo, hi) =
                    s.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
                Self { layer: vec![hi - lo], patch: vec![patch.range] }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.layer.len() + self.patch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(&self) -> Vec<f32> {
        let mut v = self.layer.clone();
        v.extend_from_slice(&self.patch);
        v
    }
}

/// Outcome of a bit-width selection for one (patch, layer) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen_index: usize,
    pub chosen_bit: u32,
    pub probs: Vec<f32>,
    pub expected_bit: f32,
}

impl Selection {
    /// Argmax selection with ties broken toward the lowest bit. `bits` must
    /// be sorted ascending.
    pub fn from_probs(probs: &[f32], bits: &[u32]) -> Self {
        let mut best = 0;
        for (k, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = k;
            }
        }
        let expected = probs.iter().zip(bits).map(|(p, b)| *p as f64 * *b as f64).sum::<f64>();
        Self { chosen_index: best, chosen_bit: bits[best], probs: probs.to_vec(), expected_bit: expected as f32 }
    }

    /// A one-hot selection of candidate `index`.
    pub fn forced(index: usize, bits: &[u32]) -> Self {
        let mut probs = vec![0.0; bits.len()];
        probs[index] = 1.0;
        Self { chosen_index: index, chosen_bit: bits[index], probs, expected_bit: bits[index] as f32 }
    }
}

/// Fully connected bit selector `R^D → R^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BitSelector {
    /// Row-major (D, K).
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub candidate_bits: Vec<u32>,
    /// Per-input affine normalization applied before the linear map;
    /// identity unless normalization is enabled and calibrated.
    pub input_shift: Vec<f32>,
    pub input_scale: Vec<f32>,
}

impl BitSelector {
    /// Zero weights; the bias favours the highest bit-width by `high_bias`
    /// so that an untrained selector reproduces the full-precision path.
    pub fn new(input_dim: usize, candidate_bits: &[u32], high_bias: f32) -> Result<Self> {
        validate_bits(candidate_bits)?;
        let k = candidate_bits.len();
        let mut bias = vec![0.0; k];
        bias[k - 1] = high_bias;
        Ok(Self {
            weight: vec![0.0; input_dim * k],
            bias,
            candidate_bits: candidate_bits.to_vec(),
            input_shift: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_shift.len()
    }

    pub fn num_candidates(&self) -> usize {
        self.candidate_bits.len()
    }

    /// Applies the input normalization.
    pub fn normalize(&self, raw: &[f32]) -> Vec<f32> {
        raw.iter().zip(&self.input_shift).zip(&self.input_scale).map(|((v, s), c)| (v - s) * c).collect()
    }

    /// Sets the normalization from a calibration set of raw feature rows so
    /// that each input has zero mean and unit spread over that set.
    pub fn calibrate_normalization(&mut self, rows: &[Vec<f32>]) {
        let d = self.input_dim();
        for j in 0..d {
            let col: Vec<f32> = rows.iter().map(|r| r[j]).collect();
            let (mean, std) = mean_std(&col);
            self.input_shift[j] = mean as f32;
            self.input_scale[j] = if std > 1e-6 { (1.0 / std) as f32 } else { 1.0 };
        }
    }

    pub fn logits(&self, feats: &SensitivityFeatures) -> Result<Vec<f32>> {
        let raw = feats.concat();
        if raw.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "selector expects {} inputs, features have {}",
                self.input_dim(),
                raw.len()
            )));
        }
        let x = self.normalize(&raw);
        let k = self.num_candidates();
        Ok((0..k)
            .map(|j| {
                let mut acc = self.bias[j] as f64;
                for (r, v) in x.iter().enumerate() {
                    acc += *v as f64 * self.weight[r * k + j] as f64;
                }
                acc as f32
            })
            .collect())
    }

    pub fn select(&self, feats: &SensitivityFeatures) -> Result<Selection> {
        let z = self.logits(feats)?;
        Ok(Selection::from_probs(&softmax(&z), &self.candidate_bits))
    }
}

/// Candidate bit-widths must be non-empty, strictly increasing and within
/// 2..=8.
pub fn validate_bits(bits: &[u32]) -> Result<()> {
    if bits.is_empty() {
        return Err(Error::Config("candidate bit list is empty".into()));
    }
    if bits.iter().any(|b| !(2..=8).contains(b)) {
        return Err(Error::Config(format!("candidate bits {bits:?} must lie in 2..=8")));
    }
    if bits.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("candidate bits {bits:?} must be strictly increasing")));
    }
    Ok(())
}

pub fn format_bits(bits: &[u32]) -> String {
    let parts: Vec<String> = bits.iter().map(|b| format!("{b}")).collect();
    parts.join(",")
}
