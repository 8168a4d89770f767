//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the
//! references it needs for its backward rule. Nodes are only ever appended
//! after their inputs, so walking the tape from the end visits each node
//! once, in reverse topological order.
//!
//! The op set is exactly what the super-resolution network and its training
//! objective need; there is no broadcasting beyond per-channel constants.

mod conv;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{absf, dot_f64, exp64, sum_f64};
use crate::quant::{int_range, quantize_value, scale_grad, ste_mask, QuantMode};
use crate::{Error, Result, Shape, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Bit-width and range convention of one feature quantizer on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u32,
    pub mode: QuantMode,
}

impl QuantSpec {
    fn int_range(&self) -> f32 {
        int_range(self.bits, self.mode)
    }
}

/// Clip scale of a feature quantizer on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleSource {
    /// A scalar node, normally a learned parameter.
    Learned(Var),
    /// Largest magnitude of each batch sample, not differentiated.
    SampleMax,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f32),
    OffsetChannels(Var),
    PixelShuffle(Var, usize),
    Sum(Var),
    WeightedSum(Var, Vec<f32>),
    Combine(Vec<(Var, f32)>),
    L1Mean(Var, Vec<f32>),
    MseMean(Var, Vec<f32>),
    Linear { x: Var, w: Var, b: Var },
    Softmax(Var),
    QuantizeWeight(Var),
    Mixture { x: Var, probs: Var, scales: Vec<ScaleSource>, specs: Vec<QuantSpec>, sample_scales: Vec<f32> },
    BitRegularizer { probs: Var, bits: Vec<f32>, ops: f64, denominators: Option<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backward.
///
/// One tape per training step; a tape is single-writer.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: Shape, b: Shape) -> Error {
    Error::Dimension(format!("{what}: shapes {a} and {b} are incompatible"))
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last [`GradTape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// 2-D convolution; `w` has shape (C_in, C_out, F, F) and the optional
    /// bias shape (1, C_out, 1, 1).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c {
            return Err(shape_err("conv2d input channels", xs, ws));
        }
        if ws.h != ws.w || ws.h % 2 == 0 {
            return Err(Error::Dimension(format!("conv2d kernel must be square and odd, got {ws}")));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be at least 1".into()));
        }
        if xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return Err(shape_err("conv2d kernel larger than padded input", xs, ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.c {
                return Err(shape_err("conv2d bias", bs, ws));
            }
        }
        let geom = conv::ConvGeom { x: xs, c_out: ws.c, f: ws.h, stride, pad };
        let out = conv::forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push(Tensor::from_parts(geom.out_shape(), out), Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(sa, data), Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Adds a constant per channel (e.g. re-adding a mean colour).
    pub fn offset_channels(&mut self, x: Var, offsets: &[f32]) -> Result<Var> {
        let s = self.shape(x);
        if offsets.len() != s.c {
            return Err(Error::Dimension(format!("{} channel offsets for shape {s}", offsets.len())));
        }
        let mut out = self.value(x).clone();
        out.clear_grad();
        let p = s.plane();
        for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
            let o = offsets[i % s.c];
            chunk.iter_mut().for_each(|v| *v += o);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::OffsetChannels(x), rg))
    }

    /// Depth-to-space: (N, C·r², H, W) → (N, C, H·r, W·r).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), r)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::PixelShuffle(x, r), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = sum_f64(self.data(x)) as f32;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    /// `Σ r_i x_i` for a constant weight vector `r`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        if weights.len() != self.shape(x).numel() {
            return Err(Error::Dimension(format!(
                "weighted_sum: {} weights for shape {}",
                weights.len(),
                self.shape(x)
            )));
        }
        let v = dot_f64(self.data(x), &weights) as f32;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(x, weights), rg))
    }

    /// Linear combination of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut acc = 0f64;
        for (v, c) in terms {
            if self.shape(*v).numel() != 1 {
                return Err(Error::Contract(format!("combine expects scalars, got {}", self.shape(*v))));
            }
            acc += self.value(*v).item() as f64 * *c as f64;
        }
        let rg = terms.iter().any(|(v, _)| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::scalar(acc as f32), Op::Combine(terms.to_vec()), rg))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_mean(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let s = self.shape(x);
        if s != target.shape() {
            return Err(shape_err("l1 loss", s, target.shape()));
        }
        let total: f64 = self.data(x).iter().zip(target.data()).map(|(a, b)| absf(a - b) as f64).sum();
        let rg = self.rg(&[x]);
        let v = (total / s.numel() as f64) as f32;
        Ok(self.push(Tensor::scalar(v), Op::L1Mean(x, target.data().to_vec()), rg))
    }

    /// Mean squared error against a constant (detached) target.
    pub fn mse_mean(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let s = self.shape(x);
        if s != target.shape() {
            return Err(shape_err("mse loss", s, target.shape()));
        }
        let total: f64 = self
            .data(x)
            .iter()
            .zip(target.data())
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum();
        let rg = self.rg(&[x]);
        let v = (total / s.numel() as f64) as f32;
        Ok(self.push(Tensor::scalar(v), Op::MseMean(x, target.data().to_vec()), rg))
    }

    /// Row-wise affine map. `x` is (N, D, 1, 1), `w` is (1, 1, D, K) and `b`
    /// is (1, K, 1, 1); the result is (N, K, 1, 1).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (d, k) = (ws.h, ws.w);
        if xs.c * xs.h * xs.w != d || ws.n * ws.c != 1 {
            return Err(shape_err("linear input", xs, ws));
        }
        if bs.numel() != k {
            return Err(shape_err("linear bias", bs, ws));
        }
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0f32; xs.n * k];
        for i in 0..xs.n {
            for j in 0..k {
                let mut acc = bd[j] as f64;
                for r in 0..d {
                    acc += xd[i * d + r] as f64 * wd[r * k + j] as f64;
                }
                out[i * k + j] = acc as f32;
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(Shape::new(xs.n, k, 1, 1), out), Op::Linear { x, w, b }, rg))
    }

    /// Softmax over the channel axis of an (N, K, 1, 1) node.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let s = self.shape(z);
        if s.h * s.w != 1 {
            return Err(Error::Dimension(format!("softmax expects (N, K, 1, 1), got {s}")));
        }
        let mut out = vec![0f32; s.numel()];
        for (row, dst) in self.data(z).chunks(s.c).zip(out.chunks_mut(s.c)) {
            softmax_row(row, dst);
        }
        let rg = self.rg(&[z]);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax(z), rg))
    }

    /// Symmetric weight quantization with scale `max |w|`; the gradient is
    /// passed straight through.
    pub fn quantize_weight(&mut self, w: Var, bits: u32) -> Var {
        let wq = crate::quant::WeightQuantizer { bits };
        let out = Tensor::from_parts(self.shape(w), wq.quantize_slice(self.data(w)));
        let rg = self.rg(&[w]);
        self.push(out, Op::QuantizeWeight(w), rg)
    }

    /// Single feature quantizer with straight-through gradients to the input
    /// and to a learned scale.
    pub fn quantize_feature(&mut self, x: Var, scale: ScaleSource, spec: QuantSpec) -> Result<Var> {
        let n = self.shape(x).n;
        let probs = self.constant(Tensor::from_parts(Shape::new(n, 1, 1, 1), vec![1.0; n]));
        self.mixture(x, probs, &[scale], &[spec], &vec![0; n])
    }

    /// Dynamic quantization of each batch sample.
    ///
    /// Forward: sample `i` is quantized by candidate `chosen[i]` only.
    /// Backward: gradients follow the surrogate `Σ_k P[i,k] · Q_k(x_i)`, so
    /// the input, every learned scale and the probabilities all receive a
    /// gradient.
    pub fn mixture(
        &mut self,
        x: Var,
        probs: Var,
        scales: &[ScaleSource],
        specs: &[QuantSpec],
        chosen: &[usize],
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ps = self.shape(probs);
        let k = specs.len();
        if k == 0 || scales.len() != k {
            return Err(Error::Contract(format!("mixture: {} scales for {k} quantizers", scales.len())));
        }
        if ps != Shape::new(xs.n, k, 1, 1) {
            return Err(shape_err("mixture probabilities", ps, xs));
        }
        if chosen.len() != xs.n || chosen.iter().any(|c| *c >= k) {
            return Err(Error::State(format!(
                "mixture: selection covers {} samples with indices < {k}, batch has {}",
                chosen.len(),
                xs.n
            )));
        }
        for s in scales {
            if let ScaleSource::Learned(v) = s {
                if self.shape(*v).numel() != 1 {
                    return Err(Error::Dimension(format!("clip scale must be a scalar, got {}", self.shape(*v))));
                }
                let a = self.value(*v).item();
                if !(a > 0.0) {
                    return Err(Error::Parameter(format!("clip scale must be positive, got {a}")));
                }
            }
        }
        let len = xs.sample_len();
        let xd = self.data(x);
        let sample_max: Vec<f32> =
            xd.chunks(len).map(|c| c.iter().fold(0f32, |m, v| m.max(absf(*v)))).collect();
        // scale per (candidate, sample)
        let mut sample_scales = vec![0f32; k * xs.n];
        for (j, s) in scales.iter().enumerate() {
            for i in 0..xs.n {
                sample_scales[j * xs.n + i] = match s {
                    ScaleSource::Learned(v) => self.value(*v).item(),
                    ScaleSource::SampleMax => sample_max[i],
                };
            }
        }
        let mut out = vec![0f32; xs.numel()];
        for (i, (src, dst)) in xd.chunks(len).zip(out.chunks_mut(len)).enumerate() {
            let j = chosen[i];
            let a = sample_scales[j * xs.n + i];
            let (sr, mode) = (specs[j].int_range(), specs[j].mode);
            for (d, v) in dst.iter_mut().zip(src) {
                *d = quantize_value(*v, a, sr, mode);
            }
        }
        let mut rg = self.rg(&[x, probs]);
        for s in scales {
            if let ScaleSource::Learned(v) = s {
                rg |= self.nodes[v.0].requires_grad;
            }
        }
        let op = Op::Mixture { x, probs, scales: scales.to_vec(), specs: specs.to_vec(), sample_scales };
        Ok(self.push(Tensor::from_parts(xs, out), op, rg))
    }

    /// Bit regularizer over one quantized layer.
    ///
    /// The value is `Σ_i bits[chosen_i] · ops / den_i` with `den_i = 1` for
    /// the plain form and the detached expected bit-width for the weighted
    /// form. In the backward pass the hard selected bit is replaced by the
    /// expected bit `Σ_k bits_k · P[i,k]`, which is what carries gradient to
    /// the selector; the denominator never does.
    pub fn bit_regularizer(
        &mut self,
        probs: Var,
        bits: &[f32],
        chosen: &[usize],
        ops: f64,
        denominators: Option<Vec<f64>>,
    ) -> Result<Var> {
        let ps = self.shape(probs);
        if ps.c != bits.len() || ps.h * ps.w != 1 || chosen.len() != ps.n {
            return Err(Error::Dimension(format!(
                "bit regularizer: probabilities {ps} for {} bits and {} selections",
                bits.len(),
                chosen.len()
            )));
        }
        if let Some(d) = &denominators {
            if d.len() != ps.n {
                return Err(Error::Dimension(format!("{} denominators for batch {}", d.len(), ps.n)));
            }
            if d.iter().any(|e| !(*e > 0.0)) {
                return Err(Error::Contract("expected bit-width must be positive".into()));
            }
        }
        let mut total = 0f64;
        for (i, c) in chosen.iter().enumerate() {
            let den = denominators.as_ref().map_or(1.0, |d| d[i]);
            total += bits[*c] as f64 * ops / den;
        }
        let rg = self.rg(&[probs]);
        let op = Op::BitRegularizer { probs, bits: bits.to_vec(), ops, denominators };
        Ok(self.push(Tensor::scalar(total as f32), op, rg))
    }

    /// Back-propagates from a scalar node, filling the gradient slot of every
    /// node that requires one. Earlier gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.shape(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {}", self.shape(loss))));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = conv::ConvGeom {
                    x: self.shape(*x),
                    c_out: self.shape(*w).c,
                    f: self.shape(*w).h,
                    stride: *stride,
                    pad: *pad,
                };
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, conv::backward_input(&geom, g, self.data(*w)));
                }
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, conv::backward_weight(&geom, g, self.data(*x)));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        self.accumulate(grads, *b, conv::backward_bias(&geom, g));
                    }
                }
            }
            Op::Relu(x) => {
                let gx = self.data(*x).iter().zip(g).map(|(v, d)| if *v > 0.0 { *d } else { 0.0 }).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|d| d * c).collect()),
            Op::OffsetChannels(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::PixelShuffle(x, r) => {
                let gt = Tensor::from_parts(node.value.shape(), g.to_vec());
                let back = pixel_unshuffle(&gt, *r).expect("shape checked in forward");
                self.accumulate(grads, *x, back.into_data());
            }
            Op::Sum(x) => {
                let n = self.shape(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::WeightedSum(x, r) => self.accumulate(grads, *x, r.iter().map(|v| v * g[0]).collect()),
            Op::Combine(terms) => {
                for (v, c) in terms {
                    self.accumulate(grads, *v, vec![g[0] * c]);
                }
            }
            Op::L1Mean(x, target) => {
                let scale = g[0] / target.len() as f32;
                let gx = self
                    .data(*x)
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::MseMean(x, target) => {
                let scale = 2.0 * g[0] as f64 / target.len() as f64;
                let gx = self.data(*x).iter().zip(target).map(|(a, b)| ((*a as f64 - *b as f64) * scale) as f32).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (d, k) = (ws.h, ws.w);
                let n = self.shape(*x).n;
                let (xd, wd) = (self.data(*x), self.data(*w));
                if self.requires_grad(*x) {
                    let mut gx = vec![0f32; n * d];
                    for i in 0..n {
                        for r in 0..d {
                            gx[i * d + r] = (0..k).map(|j| g[i * k + j] as f64 * wd[r * k + j] as f64).sum::<f64>() as f32;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0f32; d * k];
                    for r in 0..d {
                        for j in 0..k {
                            gw[r * k + j] = (0..n).map(|i| g[i * k + j] as f64 * xd[i * d + r] as f64).sum::<f64>() as f32;
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
                if self.requires_grad(*b) {
                    let gb = (0..k).map(|j| (0..n).map(|i| g[i * k + j] as f64).sum::<f64>() as f32).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax(z) => {
                let k = node.value.shape().c;
                let p = node.value.data();
                let mut gz = vec![0f32; p.len()];
                for ((pr, gr), dst) in p.chunks(k).zip(g.chunks(k)).zip(gz.chunks_mut(k)) {
                    let dotp: f64 = pr.iter().zip(gr).map(|(a, b)| *a as f64 * *b as f64).sum();
                    for j in 0..k {
                        dst[j] = (pr[j] as f64 * (gr[j] as f64 - dotp)) as f32;
                    }
                }
                self.accumulate(grads, *z, gz);
            }
            Op::QuantizeWeight(w) => self.accumulate(grads, *w, g.to_vec()),
            Op::Mixture { x, probs, scales, specs, sample_scales } => {
                self.backward_mixture(*x, *probs, scales, specs, sample_scales, g, grads)
            }
            Op::BitRegularizer { probs, bits, ops, denominators } => {
                let ps = self.shape(*probs);
                let mut gp = vec![0f32; ps.numel()];
                for i in 0..ps.n {
                    let den = denominators.as_ref().map_or(1.0, |d| d[i]);
                    for (j, b) in bits.iter().enumerate() {
                        gp[i * ps.c + j] = (g[0] as f64 * *b as f64 * ops / den) as f32;
                    }
                }
                self.accumulate(grads, *probs, gp);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_mixture(
        &self,
        x: Var,
        probs: Var,
        scales: &[ScaleSource],
        specs: &[QuantSpec],
        sample_scales: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let xs = self.shape(x);
        let k = specs.len();
        let len = xs.sample_len();
        let xd = self.data(x);
        let pd = self.data(probs);
        let want_x = self.requires_grad(x);
        let want_p = self.requires_grad(probs);
        let mut gx = if want_x { vec![0f32; xs.numel()] } else { Vec::new() };
        let mut gp = vec![0f32; xs.n * k];
        let mut ga = vec![0f64; k];
        for i in 0..xs.n {
            let xi = &xd[i * len..(i + 1) * len];
            let gi = &g[i * len..(i + 1) * len];
            for j in 0..k {
                let p = pd[i * k + j];
                let a = sample_scales[j * xs.n + i];
                let (sr, mode) = (specs[j].int_range(), specs[j].mode);
                if want_p {
                    let mut acc = 0f64;
                    for (v, d) in xi.iter().zip(gi) {
                        acc += *d as f64 * quantize_value(*v, a, sr, mode) as f64;
                    }
                    gp[i * k + j] = acc as f32;
                }
                if p == 0.0 {
                    continue;
                }
                if want_x {
                    let gxi = &mut gx[i * len..(i + 1) * len];
                    for ((dst, v), d) in gxi.iter_mut().zip(xi).zip(gi) {
                        *dst += p * ste_mask(*v, a, mode) * d;
                    }
                }
                if let ScaleSource::Learned(_) = scales[j] {
                    let mut acc = 0f64;
                    for (v, d) in xi.iter().zip(gi) {
                        acc += *d as f64 * scale_grad(*v, a, mode) as f64;
                    }
                    ga[j] += p as f64 * acc;
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, gx);
        }
        if want_p {
            self.accumulate(grads, probs, gp);
        }
        for (j, s) in scales.iter().enumerate() {
            if let ScaleSource::Learned(v) = s {
                self.accumulate(grads, *v, vec![ga[j] as f32]);
            }
        }
    }
}

fn softmax_row(z: &[f32], out: &mut [f32]) {
    let m = z.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
    let mut total = 0f64;
    let e: Vec<f64> = z
        .iter()
        .map(|v| {
            let e = exp64(*v as f64 - m);
            total += e;
            e
        })
        .collect();
    for (o, v) in out.iter_mut().zip(e) {
        *o = (v / total) as f32;
    }
}

/// Softmax of one logit vector, shared with non-tape callers.
pub fn softmax(z: &[f32]) -> Vec<f32> {
    let mut out = vec![0f32; z.len()];
    softmax_row(z, &mut out);
    out
}

/// Depth-to-space rearrangement: output `(n, c, h·r + i, w·r + j)` reads
/// input channel `c·r² + i·r + j` at `(h, w)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::Dimension(format!("pixel_shuffle: {} channels not divisible by r²={}", s.c, r * r)));
    }
    let co = s.c / (r * r);
    let os = Shape::new(s.n, co, s.h * r, s.w * r);
    let mut out = vec![0f32; os.numel()];
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let src_c = c * r * r + i * r + j;
                    for h in 0..s.h {
                        let src = &xd[s.index(n, src_c, h, 0)..][..s.w];
                        let row = os.index(n, c, h * r + i, 0);
                        for (w, v) in src.iter().enumerate() {
                            out[row + w * r + j] = *v;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(os, out))
}

/// Space-to-depth, the inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::Dimension(format!("pixel_unshuffle: spatial size {}x{} not divisible by {r}", s.h, s.w)));
    }
    let os = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = vec![0f32; os.numel()];
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = c * r * r + i * r + j;
                    for h in 0..os.h {
                        let row = s.index(n, c, h * r + i, 0);
                        let dst = os.index(n, dst_c, h, 0);
                        for w in 0..os.w {
                            out[dst + w] = xd[row + w * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(os, out))
}
