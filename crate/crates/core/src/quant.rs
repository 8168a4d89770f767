//! Uniform feature and weight quantizers.
//!
//! A quantizer clamps its input to a range set by the scale `a`, maps that
//! range onto the integer grid `[-s, s]` (or `[0, s]` for non-negative
//! inputs), rounds half away from zero and maps back. Rounding is made
//! differentiable with the straight-through estimator: the input gradient is
//! the clamp indicator, and the scale gradient is `+1` above the range, `-1`
//! below it and `0` inside.

use alloc::format;

use crate::math::{absf, round_half_away};
use crate::{Error, Result, Tensor};

/// Range convention of a feature quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    /// `[-a, a]` onto `[-(2^(b-1)-1), 2^(b-1)-1]`.
    Symmetric,
    /// `[0, a]` onto `[0, 2^b - 1]`, for features coming out of a ReLU.
    ReluAsymmetric,
}

/// Where the clip scale comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Learned clip scale.
    Pams,
    /// No clipping: the scale is the largest magnitude of the tensor being
    /// quantized, recomputed on every call.
    Linq,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Pams => "pams",
            Family::Linq => "linq",
        }
    }
}

/// Integer half-range `s(b)` for a bit-width and mode.
pub fn int_range(bits: u32, mode: QuantMode) -> f32 {
    match mode {
        QuantMode::Symmetric => ((1u32 << (bits - 1)) - 1) as f32,
        QuantMode::ReluAsymmetric => ((1u32 << bits) - 1) as f32,
    }
}

/// Quantizes one value. A non-positive scale passes the value through.
#[inline]
pub fn quantize_value(x: f32, a: f32, s: f32, mode: QuantMode) -> f32 {
    if a <= 0.0 {
        return x;
    }
    let c = match mode {
        QuantMode::Symmetric => x.clamp(-a, a),
        QuantMode::ReluAsymmetric => x.clamp(0.0, a),
    };
    let q = round_half_away(c * (s / a));
    (q / s) * a
}

/// Straight-through input gradient: 1 inside the clamp range, 0 outside.
#[inline]
pub fn ste_mask(x: f32, a: f32, mode: QuantMode) -> f32 {
    if a <= 0.0 {
        return 1.0;
    }
    let inside = match mode {
        QuantMode::Symmetric => x >= -a && x <= a,
        QuantMode::ReluAsymmetric => x >= 0.0 && x <= a,
    };
    if inside {
        1.0
    } else {
        0.0
    }
}

/// Derivative of the quantizer output with respect to the clip scale.
#[inline]
pub fn scale_grad(x: f32, a: f32, mode: QuantMode) -> f32 {
    if a <= 0.0 {
        return 0.0;
    }
    if x > a {
        1.0
    } else if x < -a && mode == QuantMode::Symmetric {
        -1.0
    } else {
        0.0
    }
}

/// One candidate feature quantizer of a dynamic quantization module.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateQuantizer {
    pub bits: u32,
    /// Clip scale; unused by [`Family::Linq`].
    pub scale: f32,
    pub mode: QuantMode,
    pub family: Family,
}

/// Smallest scale kept after an optimizer step.
pub const MIN_SCALE: f32 = 1e-4;

impl CandidateQuantizer {
    pub fn new(bits: u32, scale: f32, mode: QuantMode, family: Family) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::Parameter(format!("feature bit-width {bits} outside 2..=8")));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Parameter(format!("clip scale must be positive, got {scale}")));
        }
        Ok(Self { bits, scale, mode, family })
    }

    pub fn int_range(&self) -> f32 {
        int_range(self.bits, self.mode)
    }

    /// Keeps the learned scale strictly positive.
    pub fn clamp_scale(&mut self) {
        if !(self.scale >= MIN_SCALE) {
            self.scale = MIN_SCALE;
        }
    }
}

/// Quantizes a feature tensor with a single candidate quantizer. For LinQ
/// the scale is taken per batch sample.
pub fn quantize_feature(x: &Tensor, q: &CandidateQuantizer) -> Result<Tensor> {
    let s = q.int_range();
    match q.family {
        Family::Pams => {
            if !(q.scale > 0.0) {
                return Err(Error::Parameter(format!("clip scale must be positive, got {}", q.scale)));
            }
            Ok(x.map(|v| quantize_value(v, q.scale, s, q.mode)))
        }
        Family::Linq => {
            let mut out = x.clone();
            out.clear_grad();
            let len = x.shape().sample_len();
            for chunk in out.data_mut().chunks_mut(len) {
                let a = chunk.iter().fold(0f32, |m, v| m.max(absf(*v)));
                chunk.iter_mut().for_each(|v| *v = quantize_value(*v, a, s, q.mode));
            }
            Ok(out)
        }
    }
}

/// LinQ scale: largest magnitude over the whole tensor.
pub fn linq_scale(x: &Tensor) -> f32 {
    x.max_abs()
}

/// Fixed-bit symmetric weight quantizer whose scale is `max |w|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightQuantizer {
    pub bits: u32,
}

impl Default for WeightQuantizer {
    fn default() -> Self {
        Self { bits: 8 }
    }
}

impl WeightQuantizer {
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Parameter(format!("weight bit-width {bits} outside 2..=16")));
        }
        Ok(Self { bits })
    }

    /// The scale used for `w`, `max |w|`.
    pub fn scale_for(&self, w: &[f32]) -> f32 {
        w.iter().fold(0f32, |m, v| m.max(absf(*v)))
    }

    pub fn quantize_slice(&self, w: &[f32]) -> alloc::vec::Vec<f32> {
        let a = self.scale_for(w);
        let s = int_range(self.bits, QuantMode::Symmetric);
        w.iter().map(|v| quantize_value(*v, a, s, QuantMode::Symmetric)).collect()
    }
}

/// Quantizes a weight tensor. An all-zero tensor is returned unchanged.
pub fn quantize_weight(w: &Tensor, wq: &WeightQuantizer) -> Result<Tensor> {
    if w.shape().numel() == 0 {
        return Err(Error::Contract("cannot quantize an empty weight tensor".into()));
    }
    Tensor::from_vec(w.shape(), wq.quantize_slice(w.data()))
}
