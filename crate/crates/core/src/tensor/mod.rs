//! Dense row-major tensors, a reverse-mode tape, and a finite-difference
//! gradient checker.
//!
//! Tensors are channel-major: a video feature map is stored as `C×T×H×W`
//! and a point sequence as `C×N`, so per-channel reductions read
//! contiguous memory and frame-wise convolutions become a single GEMM.

mod element;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

pub use element::Element;
pub use gradcheck::{grad_check, GradCheckConfig, GradientReport};
pub use graph::{Gradients, Graph, NodeId};
pub(crate) use graph::shift_frames as graph_shift;
pub use params::{Init, ParamStore};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    dims: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor dims must be non-empty and positive, got {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                dim: "element count",
                expected: numel,
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor whose dims are known to be valid; panics otherwise.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, E::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: E) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self::from_parts(dims, vec![value; n])
    }

    pub fn scalar(value: E) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> E) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self::from_parts(dims, (0..n).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        if numel != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                dim: "element count",
                expected: self.data.len(),
                found: numel,
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> E {
        self.data[self.offset(index)]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|v| F::lit(v.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().fold(E::zero(), |a, b| a + b)
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        (self.dims == other.dims).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max)
        })
    }
}
