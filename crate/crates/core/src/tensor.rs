//! Dense 4-D `f32` tensors in NCHW layout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

/// Batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one batch sample.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A 4-D tensor with an optional gradient slot of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.numel()], grad: None }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self { shape, data: vec![value; shape.numel()], grad: None }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite value {} at index {i}", data[i])));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: Shape::scalar(), data: vec![value], grad: None }
    }

    /// A (1, len, 1, 1) vector.
    pub fn vector(values: &[f32]) -> Self {
        Self { shape: Shape::new(1, values.len(), 1, 1), data: values.to_vec(), grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} does not match tensor shape {}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Dimension(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Contiguous view of one channel plane of one sample.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Contiguous view of one sample.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies sample `n` into a new (1, C, H, W) tensor.
    pub fn sample_tensor(&self, n: usize) -> Tensor {
        let s = self.shape;
        Tensor { shape: Shape::new(1, s.c, s.h, s.w), data: self.sample(n).to_vec(), grad: None }
    }

    /// Stacks (1, C, H, W) tensors of identical shape along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Contract("cannot stack zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::Dimension(format!("cannot stack {} with {}", s, t.shape)));
            }
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Ok(Tensor { shape: Shape::new(n, s.c, s.h, s.w), data, grad: None })
    }

    /// Copies the spatial window `[y, y+h) × [x, x+w)` of every sample.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if y + h > s.h || x + w > s.w {
            return Err(Error::Dimension(format!(
                "crop ({y}, {x}, {h}, {w}) exceeds spatial size {}x{}",
                s.h, s.w
            )));
        }
        let out_shape = Shape::new(s.n, s.c, h, w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                for row in y..y + h {
                    let start = s.index(n, c, row, x);
                    data.extend_from_slice(&self.data[start..start + w]);
                }
            }
        }
        Ok(Tensor { shape: out_shape, data, grad: None })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(crate::math::absf(*v)))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| f(*v)).collect(), grad: None }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data, grad: None }
    }
}
