//! Toy residual super-resolution backbone with a dynamic quantization
//! module in front of every convolution of its residual blocks.
//!
//! ```text
//! lr ─ −mean ─ head ─┬─ block ─ … ─ block ─ + ─ tail ─ shuffle ─ +mean ─ sr
//!                    └──────────────────────┘
//! block: x ─┬─ Q → conv1 ─ relu ─ Q → conv2 ─ + ─
//!           └─────────────────────────────────┘
//! ```
//!
//! Head, tail and every skip path stay in full precision.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradTape, QuantSpec, ScaleSource, Var};
use crate::cost::{conv_macs, CostLedger, LedgerEntry};
use crate::quant::{CandidateQuantizer, Family, QuantMode, WeightQuantizer, MIN_SCALE};
use crate::selector::{validate_bits, BitSelector, PatchStats, SensitivityFeatures, SensitivityMeasure, Selection};
use crate::{Error, Result, Shape, Tensor};

const KERNEL: usize = 3;

/// Architecture and quantization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub candidate_bits: Vec<u32>,
    pub family: Family,
    pub measure: SensitivityMeasure,
    pub weight_bits: u32,
    /// Mean colour in `[0, 1]`, subtracted at the input.
    pub rgb_mean: [f32; 3],
    /// Intensity range the network operates in; pixels are mapped from
    /// `[0, 255]` to `[0, rgb_range]`.
    pub rgb_range: f32,
    /// Initial selector logit advantage of the highest candidate.
    pub selector_init_bias: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            channels: 16,
            scale: 2,
            candidate_bits: vec![4, 6, 8],
            family: Family::Pams,
            measure: SensitivityMeasure::GradientChannelStd,
            weight_bits: 8,
            rgb_mean: [0.4488, 0.4371, 0.4040],
            rgb_range: 1.0,
            selector_init_bias: 2.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "blocks ({}) and channels ({}) must be positive",
                self.blocks, self.channels
            )));
        }
        if !matches!(self.scale, 1..=4) {
            return Err(Error::Config(format!("scale {} outside 1..=4", self.scale)));
        }
        validate_bits(&self.candidate_bits)?;
        WeightQuantizer::new(self.weight_bits).map_err(|e| Error::Config(format!("{e}")))?;
        if !(self.rgb_range > 0.0) {
            return Err(Error::Config(format!("rgb_range must be positive, got {}", self.rgb_range)));
        }
        if self.rgb_mean.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config(format!("rgb_mean {:?} must lie in [0, 1]", self.rgb_mean)));
        }
        Ok(())
    }

    /// Number of quantized convolutions.
    pub fn quantized_layers(&self) -> usize {
        2 * self.blocks
    }
}

/// How feature bit-widths are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Per-patch selection by the bit selectors.
    Student,
    /// Every selection forced to the given candidate bit-width.
    Fixed(u32),
    /// No quantization at all.
    Float32,
}

impl Mode {
    /// The uniform 8-bit teacher.
    pub const TEACHER: Mode = Mode::Fixed(8);

    pub fn label(&self) -> String {
        match self {
            Mode::Student => "student".into(),
            Mode::Fixed(b) => format!("fixed{b}"),
            Mode::Float32 => "float32".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Mode::Student),
            "float32" => Ok(Mode::Float32),
            _ => s
                .strip_prefix("fixed")
                .and_then(|b| b.parse().ok())
                .map(Mode::Fixed)
                .ok_or_else(|| Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Candidate quantizers, bit selector and weight quantizer of one
/// quantized convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CadyqModule {
    pub quantizers: Vec<CandidateQuantizer>,
    pub selector: BitSelector,
    pub weight_quantizer: WeightQuantizer,
}

impl CadyqModule {
    pub fn new(cfg: &NetConfig, mode: QuantMode) -> Result<Self> {
        let quantizers = cfg
            .candidate_bits
            .iter()
            .map(|b| CandidateQuantizer::new(*b, 1.0, mode, cfg.family))
            .collect::<Result<Vec<_>>>()?;
        let selector =
            BitSelector::new(cfg.measure.input_dim(cfg.channels), &cfg.candidate_bits, cfg.selector_init_bias)?;
        Ok(Self { quantizers, selector, weight_quantizer: WeightQuantizer::new(cfg.weight_bits)? })
    }

    fn specs(&self) -> Vec<QuantSpec> {
        self.quantizers.iter().map(|q| QuantSpec { bits: q.bits, mode: q.mode }).collect()
    }

    fn bits(&self) -> Vec<u32> {
        self.quantizers.iter().map(|q| q.bits).collect()
    }
}

/// A 3×3 convolution with its quantization module. Weight layout is
/// (C_in, C_out, 3, 3).
#[derive(Debug, Clone, PartialEq)]
pub struct QConv {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub module: CadyqModule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: QConv,
    pub conv2: QConv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrNetwork {
    pub cfg: NetConfig,
    pub mode: Mode,
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
    pub blocks: Vec<ResBlock>,
    pub tail_w: Vec<f32>,
    pub tail_b: Vec<f32>,
}

/// Optimizer group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Weight,
    Scale,
    Selector,
}

/// A named parameter slice; the list order is the binding and
/// serialization order.
#[derive(Debug)]
pub struct Param<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Shape,
    pub data: &'a [f32],
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Shape,
    pub data: &'a mut [f32],
}

/// Tape handles of one quantized layer's selection, for the bit loss.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer_id: usize,
    /// (N, K, 1, 1) selection probabilities.
    pub probs: Var,
    pub chosen: Vec<usize>,
    pub expected: Vec<f64>,
    pub bits: Vec<f32>,
    /// Operations per patch.
    pub ops: f64,
    /// Layer input feature.
    pub input: Var,
    /// Raw (unnormalized) selector inputs per patch.
    pub features: Vec<Vec<f32>>,
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug)]
pub struct Forward {
    /// Output in network intensity units, `[0, rgb_range]`.
    pub sr: Var,
    /// Residual-block outputs, in block order.
    pub feats: Vec<Var>,
    pub ledger: CostLedger,
    pub layers: Vec<LayerTrace>,
    /// One handle per entry of [`SrNetwork::params`].
    pub params: Vec<Var>,
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = libm::sqrtf(6.0 / fan_in as f32);
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl SrNetwork {
    /// Network with empty weights; [`SrNetwork::forward`] refuses it until
    /// parameters are filled in.
    pub fn uninitialized(cfg: NetConfig, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let conv = |m| -> Result<QConv> {
                Ok(QConv { weight: Vec::new(), bias: Vec::new(), module: CadyqModule::new(&cfg, m)? })
            };
            blocks.push(ResBlock { conv1: conv(QuantMode::Symmetric)?, conv2: conv(QuantMode::ReluAsymmetric)? });
        }
        Ok(Self { cfg, mode, head_w: Vec::new(), head_b: Vec::new(), blocks, tail_w: Vec::new(), tail_b: Vec::new() })
    }

    /// He-uniform weights and zero biases from `seed`.
    pub fn new(cfg: NetConfig, mode: Mode, seed: u64) -> Result<Self> {
        let mut net = Self::uninitialized(cfg, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = net.cfg.channels;
        let r2 = net.cfg.scale * net.cfg.scale;
        let kk = KERNEL * KERNEL;
        net.head_w = he_uniform(&mut rng, 3 * kk, 3 * c * kk);
        net.head_b = vec![0.0; c];
        for b in &mut net.blocks {
            for conv in [&mut b.conv1, &mut b.conv2] {
                conv.weight = he_uniform(&mut rng, c * kk, c * c * kk);
                conv.bias = vec![0.0; c];
            }
        }
        net.tail_w = he_uniform(&mut rng, c * kk, c * 3 * r2 * kk);
        net.tail_b = vec![0.0; 3 * r2];
        Ok(net)
    }

    pub fn is_initialized(&self) -> bool {
        self.params().iter().all(|p| p.data.len() == p.shape.numel())
    }

    fn convs(&self) -> impl Iterator<Item = &QConv> {
        self.blocks.iter().flat_map(|b| [&b.conv1, &b.conv2])
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut QConv> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.conv1, &mut b.conv2])
    }

    pub fn modules(&self) -> impl Iterator<Item = &CadyqModule> {
        self.convs().map(|c| &c.module)
    }

    pub fn modules_mut(&mut self) -> impl Iterator<Item = &mut CadyqModule> {
        self.convs_mut().map(|c| &mut c.module)
    }

    fn param_layout(&self) -> Vec<(String, ParamGroup, Shape)> {
        let c = self.cfg.channels;
        let k = self.cfg.candidate_bits.len();
        let d = self.cfg.measure.input_dim(c);
        let out = 3 * self.cfg.scale * self.cfg.scale;
        let mut v = vec![
            ("head.weight".into(), ParamGroup::Weight, Shape::new(3, c, KERNEL, KERNEL)),
            ("head.bias".into(), ParamGroup::Weight, Shape::new(1, c, 1, 1)),
        ];
        for (i, _) in self.convs().enumerate() {
            let p = format!("block{}.conv{}", i / 2, i % 2 + 1);
            v.push((format!("{p}.weight"), ParamGroup::Weight, Shape::new(c, c, KERNEL, KERNEL)));
            v.push((format!("{p}.bias"), ParamGroup::Weight, Shape::new(1, c, 1, 1)));
            for b in &self.cfg.candidate_bits {
                v.push((format!("{p}.scale{b}"), ParamGroup::Scale, Shape::scalar()));
            }
            v.push((format!("{p}.selector.weight"), ParamGroup::Selector, Shape::new(1, 1, d, k)));
            v.push((format!("{p}.selector.bias"), ParamGroup::Selector, Shape::new(1, k, 1, 1)));
        }
        v.push(("tail.weight".into(), ParamGroup::Weight, Shape::new(c, out, KERNEL, KERNEL)));
        v.push(("tail.bias".into(), ParamGroup::Weight, Shape::new(1, out, 1, 1)));
        v
    }

    /// All trainable parameters in binding order.
    pub fn params(&self) -> Vec<Param<'_>> {
        let mut slices: Vec<&[f32]> = vec![&self.head_w, &self.head_b];
        for conv in self.convs() {
            slices.push(&conv.weight);
            slices.push(&conv.bias);
            for q in &conv.module.quantizers {
                slices.push(core::slice::from_ref(&q.scale));
            }
            slices.push(&conv.module.selector.weight);
            slices.push(&conv.module.selector.bias);
        }
        slices.push(&self.tail_w);
        slices.push(&self.tail_b);
        self.param_layout()
            .into_iter()
            .zip(slices)
            .map(|((name, group, shape), data)| Param { name, group, shape, data })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let layout = self.param_layout();
        let mut slices: Vec<&mut [f32]> = vec![];
        slices.push(&mut self.head_w);
        slices.push(&mut self.head_b);
        for b in &mut self.blocks {
            for conv in [&mut b.conv1, &mut b.conv2] {
                slices.push(&mut conv.weight);
                slices.push(&mut conv.bias);
                for q in &mut conv.module.quantizers {
                    slices.push(core::slice::from_mut(&mut q.scale));
                }
                slices.push(&mut conv.module.selector.weight);
                slices.push(&mut conv.module.selector.bias);
            }
        }
        slices.push(&mut self.tail_w);
        slices.push(&mut self.tail_b);
        layout
            .into_iter()
            .zip(slices)
            .map(|((name, group, shape), data)| ParamMut { name, group, shape, data })
            .collect()
    }

    /// Resizes every parameter slice to its declared length (zero-filled),
    /// so a loader can copy values in.
    pub fn allocate(&mut self) {
        let c = self.cfg.channels;
        let r2 = self.cfg.scale * self.cfg.scale;
        let kk = KERNEL * KERNEL;
        self.head_w.resize(3 * c * kk, 0.0);
        self.head_b.resize(c, 0.0);
        for conv in self.convs_mut() {
            conv.weight.resize(c * c * kk, 0.0);
            conv.bias.resize(c, 0.0);
        }
        self.tail_w.resize(c * 3 * r2 * kk, 0.0);
        self.tail_b.resize(3 * r2, 0.0);
    }

    /// Keeps every learned clip scale at or above the floor.
    pub fn clamp_scales(&mut self) {
        for m in self.modules_mut() {
            m.quantizers.iter_mut().for_each(CandidateQuantizer::clamp_scale);
        }
    }

    fn to_network_units(&self, lr: &Tensor) -> Tensor {
        let s = lr.shape();
        let k = self.cfg.rgb_range / 255.0;
        let mut out = Tensor::zeros(s);
        let p = s.plane();
        for (i, (dst, src)) in out.data_mut().chunks_mut(p).zip(lr.data().chunks(p)).enumerate() {
            let m = self.cfg.rgb_mean[i % 3] * self.cfg.rgb_range;
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v * k - m;
            }
        }
        out
    }

    /// Maps a pixel-unit tensor (`[0, 255]`) to network units.
    pub fn scale_target(&self, hr: &Tensor) -> Tensor {
        let k = self.cfg.rgb_range / 255.0;
        hr.map(|v| v * k)
    }

    /// Maps a network-unit output back to pixels.
    pub fn to_pixels(&self, sr: &Tensor) -> Tensor {
        let k = 255.0 / self.cfg.rgb_range;
        sr.map(|v| v * k)
    }

    /// Records a forward pass of `lr` ((N, 3, H, W), pixel units) on `tape`.
    /// With `trainable` every parameter is bound as a differentiable leaf.
    pub fn forward(&self, tape: &mut GradTape, lr: &Tensor, trainable: bool) -> Result<Forward> {
        if !self.is_initialized() {
            return Err(Error::State("network weights are not initialized".into()));
        }
        let s = lr.shape();
        if s.c != 3 {
            return Err(Error::Dimension(format!("network input must have 3 channels, got {s}")));
        }
        if s.h < 2 || s.w < 2 {
            return Err(Error::Dimension(format!("network input {s} is too small")));
        }
        let fixed_index = match self.mode {
            Mode::Fixed(b) => Some(self.cfg.candidate_bits.iter().position(|c| *c == b).ok_or_else(|| {
                Error::Config(format!("fixed bit-width {b} is not among the candidates {:?}", self.cfg.candidate_bits))
            })?),
            _ => None,
        };
        let stats = (0..s.n).map(|n| PatchStats::of(lr, n)).collect::<Result<Vec<_>>>()?;

        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| {
                let t = Tensor::from_parts(p.shape, p.data.to_vec());
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        let per_layer = 4 + self.cfg.candidate_bits.len();

        let x = tape.constant(self.to_network_units(lr));
        let head = tape.conv2d(x, params[0], Some(params[1]), 1, 1)?;
        let mut cur = head;
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut ledger = CostLedger::new();
        let mut layers = Vec::with_capacity(self.cfg.quantized_layers());
        for (bi, block) in self.blocks.iter().enumerate() {
            let base = 2 + 2 * bi * per_layer;
            let ctx = LayerCtx { stats: &stats, fixed_index };
            let y = self.qconv(tape, &ctx, 2 * bi, cur, &block.conv1, &params[base..], &mut ledger, &mut layers)?;
            let y = tape.relu(y);
            let y = self.qconv(
                tape,
                &ctx,
                2 * bi + 1,
                y,
                &block.conv2,
                &params[base + per_layer..],
                &mut ledger,
                &mut layers,
            )?;
            cur = tape.add(cur, y)?;
            feats.push(cur);
        }
        let body = tape.add(cur, head)?;
        let n = params.len();
        let t = tape.conv2d(body, params[n - 2], Some(params[n - 1]), 1, 1)?;
        let t = tape.pixel_shuffle(t, self.cfg.scale)?;
        let offsets: Vec<f32> = self.cfg.rgb_mean.iter().map(|m| m * self.cfg.rgb_range).collect();
        let sr = tape.offset_channels(t, &offsets)?;
        Ok(Forward { sr, feats, ledger, layers, params })
    }

    #[allow(clippy::too_many_arguments)]
    fn qconv(
        &self,
        tape: &mut GradTape,
        ctx: &LayerCtx<'_>,
        layer_id: usize,
        x: Var,
        conv: &QConv,
        pv: &[Var],
        ledger: &mut CostLedger,
        layers: &mut Vec<LayerTrace>,
    ) -> Result<Var> {
        let (w, b) = (pv[0], pv[1]);
        let k = self.cfg.candidate_bits.len();
        let scale_vars = &pv[2..2 + k];
        let (sel_w, sel_b) = (pv[2 + k], pv[3 + k]);
        let xs = tape.shape(x);
        let macs = conv_macs(xs.c, self.cfg.channels, KERNEL, xs.h, xs.w);
        if self.mode == Mode::Float32 {
            for n in 0..xs.n {
                ledger.push(LedgerEntry {
                    patch_id: n,
                    layer_id,
                    chosen_bit: 32,
                    weight_bits: 32,
                    probs: Vec::new(),
                    expected_bit: 32.0,
                    macs,
                });
            }
            return tape.conv2d(x, w, Some(b), 1, 1);
        }
        let module = &conv.module;
        let bits = module.bits();
        let xv = tape.value(x);
        let raw: Vec<Vec<f32>> = (0..xs.n)
            .map(|n| SensitivityFeatures::compute(self.cfg.measure, xv, n, &ctx.stats[n]).concat())
            .collect();
        let (probs, selections) = match ctx.fixed_index {
            Some(idx) => {
                let sel: Vec<Selection> = (0..xs.n).map(|_| Selection::forced(idx, &bits)).collect();
                let p: Vec<f32> = sel.iter().flat_map(|s| s.probs.iter().copied()).collect();
                (tape.constant(Tensor::from_parts(Shape::new(xs.n, k, 1, 1), p)), sel)
            }
            None => {
                let d = module.selector.input_dim();
                let mut f = Vec::with_capacity(xs.n * d);
                for r in &raw {
                    if r.len() != d {
                        return Err(Error::Config(format!("selector expects {d} inputs, features have {}", r.len())));
                    }
                    f.extend(module.selector.normalize(r));
                }
                let f = tape.constant(Tensor::from_parts(Shape::new(xs.n, d, 1, 1), f));
                let z = tape.linear(f, sel_w, sel_b)?;
                let p = tape.softmax(z)?;
                let sel = tape.value(p).data().chunks(k).map(|row| Selection::from_probs(row, &bits)).collect();
                (p, sel)
            }
        };
        let scales: Vec<ScaleSource> = match self.cfg.family {
            Family::Pams => scale_vars.iter().map(|v| ScaleSource::Learned(*v)).collect(),
            Family::Linq => vec![ScaleSource::SampleMax; k],
        };
        let chosen: Vec<usize> = selections.iter().map(|s| s.chosen_index).collect();
        let xq = tape.mixture(x, probs, &scales, &module.specs(), &chosen)?;
        let wq = tape.quantize_weight(w, module.weight_quantizer.bits);
        let y = tape.conv2d(xq, wq, Some(b), 1, 1)?;
        for (n, s) in selections.iter().enumerate() {
            ledger.push(LedgerEntry {
                patch_id: n,
                layer_id,
                chosen_bit: s.chosen_bit,
                weight_bits: module.weight_quantizer.bits,
                probs: s.probs.clone(),
                expected_bit: s.expected_bit,
                macs,
            });
        }
        layers.push(LayerTrace {
            layer_id,
            probs,
            chosen,
            expected: selections.iter().map(|s| s.expected_bit as f64).collect(),
            bits: bits.iter().map(|b| *b as f32).collect(),
            ops: 2.0 * macs as f64,
            input: x,
            features: raw,
        });
        Ok(y)
    }

    /// Forward without gradients; returns the output in pixel units and
    /// the cost ledger.
    pub fn infer(&self, lr: &Tensor) -> Result<(Tensor, CostLedger)> {
        let mut tape = GradTape::new();
        let f = self.forward(&mut tape, lr, false)?;
        let sr = self.to_pixels(tape.value(f.sr));
        Ok((sr, f.ledger))
    }

    /// Sets the clip scales of every quantizer to the largest magnitude of
    /// its layer input on `lr`, except quantizers with bit-width `keep`.
    pub fn calibrate_scales(&mut self, lr: &Tensor, keep: Option<u32>) -> Result<()> {
        let saved = self.mode;
        if saved == Mode::Float32 {
            return Err(Error::State("cannot calibrate quantizers in float32 mode".into()));
        }
        let mut tape = GradTape::new();
        let f = self.forward(&mut tape, lr, false)?;
        let maxima: Vec<f32> = f.layers.iter().map(|l| tape.value(l.input).max_abs().max(MIN_SCALE)).collect();
        for (m, a) in self.modules_mut().zip(maxima) {
            for q in &mut m.quantizers {
                if Some(q.bits) != keep {
                    q.scale = a;
                }
            }
        }
        Ok(())
    }

    /// Fits each selector's input normalization to the feature statistics
    /// of `lr`.
    pub fn calibrate_selectors(&mut self, lr: &Tensor) -> Result<()> {
        let mut tape = GradTape::new();
        let f = self.forward(&mut tape, lr, false)?;
        for (m, l) in self.modules_mut().zip(&f.layers) {
            m.selector.calibrate_normalization(&l.features);
        }
        Ok(())
    }

    /// A dynamic student initialised from an 8-bit teacher: weights and
    /// the teacher's 8-bit clip scales are copied, the other candidates are
    /// calibrated on `calib`.
    pub fn student_from_teacher(teacher: &SrNetwork, calib: &Tensor, normalize_selectors: bool) -> Result<Self> {
        let mut s = teacher.clone();
        s.mode = Mode::TEACHER;
        s.calibrate_scales(calib, Some(8))?;
        if normalize_selectors {
            s.calibrate_selectors(calib)?;
        }
        s.mode = Mode::Student;
        Ok(s)
    }
}

struct LayerCtx<'a> {
    stats: &'a [PatchStats],
    fixed_index: Option<usize>,
}
