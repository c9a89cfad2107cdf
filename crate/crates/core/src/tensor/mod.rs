//! Dense tensors with tape-based reverse-mode gradients.
//!
//! [`Tensor`] is an immutable, reference-counted buffer plus a shape. Gradient
//! tracking lives on a [`Tape`]: every operator applied to a [`Var`] records a
//! node with a closure that maps the output gradient onto its inputs. The
//! tape is rebuilt for every step.

mod element;
pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
pub mod param;
pub mod resize;
pub mod rng;
mod tape;

use std::sync::Arc;

use thiserror::Error;

pub use element::Element;
pub(crate) use element::{gemm, Layout};
pub use param::{Ctx, ParamStore, Parameter};
pub use rng::RngSeed;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape { op, detail: detail.into() })
}

pub(crate) fn invalid<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Invalid { op, detail: detail.into() })
}

/// Dense row-major array. Cloning is cheap; the buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return shape_err(
                "tensor",
                format!("shape {:?} holds {} values, buffer has {}", shape, numel(&shape), data.len()),
            );
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> E) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<E> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| a.as_ref().clone())
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.len() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| F::of(v.f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Element at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> E {
        self.data[self.offset(index)]
    }

    pub(crate) fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < d, "index {} out of range on axis {}", ix, i);
            off = off * d + ix;
        }
        off
    }

    /// Dimensions of a 4-D `[B, C, H, W]` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => shape_err(op, format!("expected [B,C,H,W], got {:?}", self.shape)),
        }
    }

    /// Copy of the spatial window `[y0, y0+h) x [x0, x0+w)` of a 4-D tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (b, c, hh, ww) = self.dims4("crop")?;
        if y0 + h > hh || x0 + w > ww {
            return shape_err("crop", format!("window {}x{} at ({}, {}) exceeds {}x{}", h, w, y0, x0, hh, ww));
        }
        let mut out = Vec::with_capacity(b * c * h * w);
        for plane in 0..b * c {
            let base = plane * hh * ww;
            for y in y0..y0 + h {
                out.extend_from_slice(&self.data[base + y * ww + x0..base + y * ww + x0 + w]);
            }
        }
        Ok(Tensor::from_parts(vec![b, c, h, w], out))
    }

    /// Stacks equally shaped tensors along a new leading axis (or the existing
    /// batch axis for 4-D inputs with batch 1).
    pub fn stack_batch(items: &[Tensor<E>]) -> Result<Self> {
        let first = match items.first() {
            Some(f) => f,
            None => return invalid("stack_batch", "no tensors"),
        };
        let (_, c, h, w) = first.dims4("stack_batch")?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut batch = 0;
        for t in items {
            let (b, c2, h2, w2) = t.dims4("stack_batch")?;
            if (c2, h2, w2) != (c, h, w) {
                return shape_err("stack_batch", format!("{:?} vs {:?}", t.shape, first.shape));
            }
            batch += b;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(vec![batch, c, h, w], data))
    }

    /// Item `i` of the leading batch axis, keeping a batch of one.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4("batch_item")?;
        if i >= b {
            return shape_err("batch_item", format!("index {} of batch {}", i, b));
        }
        let n = c * h * w;
        Ok(Tensor::from_parts(vec![1, c, h, w], self.data[i * n..(i + 1) * n].to_vec()))
    }
}
