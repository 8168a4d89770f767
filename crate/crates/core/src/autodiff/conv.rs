//! Direct 2-D convolution kernels. Weights are laid out as
//! (C_in, C_out, F, F).
//!
//! Stride-1 convolutions run on zero-padded planes stored with the padded
//! row pitch, so every kernel tap is one contiguous multiply-add over the
//! whole plane; the extra columns are computed and dropped. Per-channel
//! partial sums are formed in `f32` and accumulated across channels in
//! `f64`. Other strides use the row-wise reference kernels.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::dot_f64;
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub x: Shape,
    pub c_out: usize,
    pub f: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_shape(&self) -> Shape {
        let ho = (self.x.h + 2 * self.pad - self.f) / self.stride + 1;
        let wo = (self.x.w + 2 * self.pad - self.f) / self.stride + 1;
        Shape::new(self.x.n, self.c_out, ho, wo)
    }

    #[inline]
    fn w_index(&self, ci: usize, co: usize, kh: usize, kw: usize) -> usize {
        ((ci * self.c_out + co) * self.f + kh) * self.f + kw
    }

    /// Output columns `ow` whose input column `ow*stride + k - pad` lies
    /// inside the image, as a half-open range.
    #[inline]
    fn valid_out(&self, k: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // ow*s + k - pad <= len_in - 1
        let hi = if len_in + self.pad > k { ((len_in + self.pad - k - 1) / s + 1).min(len_out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Copies each (n, c) plane into a zero border of `pad` pixels, plus
/// `slack` trailing zeros so that shifted reads never leave the buffer.
fn pad_planes(src: &[f32], s: Shape, pad: usize, slack: usize) -> (Vec<f32>, usize, usize) {
    let (hp, wp) = (s.h + 2 * pad, s.w + 2 * pad);
    let stride = hp * wp + slack;
    let mut out = vec![0f32; s.n * s.c * stride];
    for (i, plane) in src.chunks(s.h * s.w).enumerate() {
        let dst = &mut out[i * stride..];
        for (y, row) in plane.chunks(s.w).enumerate() {
            let o = (y + pad) * wp + pad;
            dst[o..o + s.w].copy_from_slice(row);
        }
    }
    (out, wp, stride)
}

/// Σ_taps w · shifted(src) into `tmp` over `len` pitched positions.
#[inline]
fn taps(tmp: &mut [f32], src: &[f32], wts: &[f32], f: usize, pitch: usize, flip: bool) {
    tmp.iter_mut().for_each(|v| *v = 0.0);
    let len = tmp.len();
    for kh in 0..f {
        for kw in 0..f {
            let wv = if flip { wts[(f - 1 - kh) * f + (f - 1 - kw)] } else { wts[kh * f + kw] };
            if wv == 0.0 {
                continue;
            }
            let s = &src[kh * pitch + kw..][..len];
            for (t, x) in tmp.iter_mut().zip(s) {
                *t += wv * *x;
            }
        }
    }
}

fn forward_s1(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let os = g.out_shape();
    let f = g.f;
    let (xp, wp, pstride) = pad_planes(x, g.x, g.pad, f);
    let len = os.h * wp;
    let mut out = vec![0f32; os.numel()];
    let mut acc = vec![0f64; len];
    let mut tmp = vec![0f32; len];
    for n in 0..g.x.n {
        for co in 0..g.c_out {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..g.x.c {
                let src = &xp[(n * g.x.c + ci) * pstride..][..pstride];
                let k0 = g.w_index(ci, co, 0, 0);
                taps(&mut tmp, src, &w[k0..k0 + f * f], f, wp, false);
                for (a, t) in acc.iter_mut().zip(&tmp) {
                    *a += *t as f64;
                }
            }
            let b = bias.map_or(0.0, |b| b[co] as f64);
            let dst = &mut out[os.index(n, co, 0, 0)..][..os.h * os.w];
            for (drow, arow) in dst.chunks_mut(os.w).zip(acc.chunks(wp)) {
                for (d, a) in drow.iter_mut().zip(arow) {
                    *d = (*a + b) as f32;
                }
            }
        }
    }
    out
}

fn backward_input_s1(g: &ConvGeom, dy: &[f32], w: &[f32]) -> Vec<f32> {
    let os = g.out_shape();
    let f = g.f;
    // dx = correlation of dy, padded by f-1-pad, with the flipped kernel
    let (dyp, wq, pstride) = pad_planes(dy, os, f - 1 - g.pad, f);
    let len = g.x.h * wq;
    let mut dx = vec![0f32; g.x.numel()];
    let mut acc = vec![0f64; len];
    let mut tmp = vec![0f32; len];
    for n in 0..g.x.n {
        for ci in 0..g.x.c {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..g.c_out {
                let src = &dyp[(n * g.c_out + co) * pstride..][..pstride];
                let k0 = g.w_index(ci, co, 0, 0);
                taps(&mut tmp, src, &w[k0..k0 + f * f], f, wq, true);
                for (a, t) in acc.iter_mut().zip(&tmp) {
                    *a += *t as f64;
                }
            }
            let dst = &mut dx[g.x.index(n, ci, 0, 0)..][..g.x.h * g.x.w];
            for (drow, arow) in dst.chunks_mut(g.x.w).zip(acc.chunks(wq)) {
                for (d, a) in drow.iter_mut().zip(arow) {
                    *d = *a as f32;
                }
            }
        }
    }
    dx
}

/// Dot product with `f32` lanes flushed into an `f64` total every 64
/// elements.
fn dot_blocked(a: &[f32], b: &[f32]) -> f64 {
    let mut total = 0f64;
    for (ca, cb) in a.chunks(64).zip(b.chunks(64)) {
        let mut lanes = [0f32; 8];
        let (ea, eb) = (ca.chunks_exact(8), cb.chunks_exact(8));
        let (ra, rb) = (ea.remainder(), eb.remainder());
        for (x, y) in ea.zip(eb) {
            for l in 0..8 {
                lanes[l] += x[l] * y[l];
            }
        }
        let mut part = 0f64;
        for l in lanes {
            part += l as f64;
        }
        for (x, y) in ra.iter().zip(rb) {
            part += (*x * *y) as f64;
        }
        total += part;
    }
    total
}

fn backward_weight_s1(g: &ConvGeom, dy: &[f32], x: &[f32]) -> Vec<f32> {
    let os = g.out_shape();
    let f = g.f;
    let (xp, wp, pstride) = pad_planes(x, g.x, g.pad, f);
    let len = os.h * wp;
    // dy in the padded row pitch, zeros in the dropped columns
    let mut dyw = vec![0f32; os.n * os.c * len];
    for (i, plane) in dy.chunks(os.h * os.w).enumerate() {
        for (y, row) in plane.chunks(os.w).enumerate() {
            dyw[i * len + y * wp..][..os.w].copy_from_slice(row);
        }
    }
    let mut dw = vec![0f32; g.x.c * g.c_out * f * f];
    for ci in 0..g.x.c {
        for co in 0..g.c_out {
            for kh in 0..f {
                for kw in 0..f {
                    let mut acc = 0f64;
                    for n in 0..g.x.n {
                        let d = &dyw[(n * os.c + co) * len..][..len];
                        let s = &xp[(n * g.x.c + ci) * pstride + kh * wp + kw..][..len];
                        acc += dot_blocked(d, s);
                    }
                    dw[g.w_index(ci, co, kh, kw)] = acc as f32;
                }
            }
        }
    }
    dw
}

fn fast_path(g: &ConvGeom) -> bool {
    g.stride == 1 && g.pad < g.f
}

pub(crate) fn forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    if fast_path(g) {
        forward_s1(g, x, w, bias)
    } else {
        forward_ref(g, x, w, bias)
    }
}

pub(crate) fn backward_input(g: &ConvGeom, dy: &[f32], w: &[f32]) -> Vec<f32> {
    if fast_path(g) {
        backward_input_s1(g, dy, w)
    } else {
        backward_input_ref(g, dy, w)
    }
}

pub(crate) fn backward_weight(g: &ConvGeom, dy: &[f32], x: &[f32]) -> Vec<f32> {
    if fast_path(g) {
        backward_weight_s1(g, dy, x)
    } else {
        backward_weight_ref(g, dy, x)
    }
}

pub(crate) fn forward_ref(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let os = g.out_shape();
    let (h, wd) = (g.x.h, g.x.w);
    let (ho, wo) = (os.h, os.w);
    let mut out = vec![0f32; os.numel()];
    let mut acc = vec![0f64; ho * wo];
    for n in 0..g.x.n {
        for co in 0..g.c_out {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..g.x.c {
                let xp = &x[g.x.index(n, ci, 0, 0)..][..h * wd];
                for kh in 0..g.f {
                    let (oh_lo, oh_hi) = g.valid_out(kh, h, ho);
                    for kw in 0..g.f {
                        let wv = w[g.w_index(ci, co, kh, kw)] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = g.valid_out(kw, wd, wo);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let arow = &mut acc[oh * wo + ow_lo..oh * wo + ow_hi];
                            if g.stride == 1 {
                                let iw0 = ow_lo + kw - g.pad;
                                let xrow = &xp[ih * wd + iw0..ih * wd + iw0 + arow.len()];
                                for (a, xv) in arow.iter_mut().zip(xrow) {
                                    *a += wv * *xv as f64;
                                }
                            } else {
                                for (j, a) in arow.iter_mut().enumerate() {
                                    let iw = (ow_lo + j) * g.stride + kw - g.pad;
                                    *a += wv * xp[ih * wd + iw] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let b = bias.map_or(0.0, |b| b[co] as f64);
            let dst = &mut out[os.index(n, co, 0, 0)..][..ho * wo];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = (*a + b) as f32;
            }
        }
    }
    out
}

/// Gradient with respect to the input.
pub(crate) fn backward_input_ref(g: &ConvGeom, dy: &[f32], w: &[f32]) -> Vec<f32> {
    let os = g.out_shape();
    let (h, wd) = (g.x.h, g.x.w);
    let (ho, wo) = (os.h, os.w);
    let mut dx = vec![0f32; g.x.numel()];
    let mut acc = vec![0f64; h * wd];
    for n in 0..g.x.n {
        for ci in 0..g.x.c {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..g.c_out {
                let dyp = &dy[os.index(n, co, 0, 0)..][..ho * wo];
                for kh in 0..g.f {
                    let (oh_lo, oh_hi) = g.valid_out(kh, h, ho);
                    for kw in 0..g.f {
                        let wv = w[g.w_index(ci, co, kh, kw)] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = g.valid_out(kw, wd, wo);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let dyrow = &dyp[oh * wo + ow_lo..oh * wo + ow_hi];
                            if g.stride == 1 {
                                let iw0 = ow_lo + kw - g.pad;
                                let arow = &mut acc[ih * wd + iw0..ih * wd + iw0 + dyrow.len()];
                                for (a, d) in arow.iter_mut().zip(dyrow) {
                                    *a += wv * *d as f64;
                                }
                            } else {
                                for (j, d) in dyrow.iter().enumerate() {
                                    let iw = (ow_lo + j) * g.stride + kw - g.pad;
                                    acc[ih * wd + iw] += wv * *d as f64;
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut dx[g.x.index(n, ci, 0, 0)..][..h * wd];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
    }
    dx
}

/// Gradient with respect to the weights.
pub(crate) fn backward_weight_ref(g: &ConvGeom, dy: &[f32], x: &[f32]) -> Vec<f32> {
    let os = g.out_shape();
    let (h, wd) = (g.x.h, g.x.w);
    let (ho, wo) = (os.h, os.w);
    let mut dw = vec![0f32; g.x.c * g.c_out * g.f * g.f];
    for ci in 0..g.x.c {
        for co in 0..g.c_out {
            for kh in 0..g.f {
                let (oh_lo, oh_hi) = g.valid_out(kh, h, ho);
                for kw in 0..g.f {
                    let (ow_lo, ow_hi) = g.valid_out(kw, wd, wo);
                    let mut acc = 0f64;
                    if ow_lo < ow_hi {
                        for n in 0..g.x.n {
                            let xp = &x[g.x.index(n, ci, 0, 0)..][..h * wd];
                            let dyp = &dy[os.index(n, co, 0, 0)..][..ho * wo];
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.stride + kh - g.pad;
                                let dyrow = &dyp[oh * wo + ow_lo..oh * wo + ow_hi];
                                if g.stride == 1 {
                                    let iw0 = ow_lo + kw - g.pad;
                                    acc += dot_f64(dyrow, &xp[ih * wd + iw0..ih * wd + iw0 + dyrow.len()]);
                                } else {
                                    for (j, d) in dyrow.iter().enumerate() {
                                        let iw = (ow_lo + j) * g.stride + kw - g.pad;
                                        acc += *d as f64 * xp[ih * wd + iw] as f64;
                                    }
                                }
                            }
                        }
                    }
                    dw[g.w_index(ci, co, kh, kw)] = acc as f32;
                }
            }
        }
    }
    dw
}

pub(crate) fn backward_bias(g: &ConvGeom, dy: &[f32]) -> Vec<f32> {
    let os = g.out_shape();
    let p = os.plane();
    (0..g.c_out)
        .map(|co| {
            (0..os.n).map(|n| crate::math::sum_f64(&dy[os.index(n, co, 0, 0)..][..p])).sum::<f64>() as f32
        })
        .collect()
}
