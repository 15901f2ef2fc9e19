//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain value: a shape of rank ≤ 4 and a row-major buffer.
//! Differentiable computation happens on a [`Graph`], which records each
//! primitive as it is applied and replays the records in reverse on
//! [`Graph::backward`]. Gradients live on the graph nodes, addressed by [`Var`].
//!
//! Log-domain tensors use [`NEG_INF`] to represent the logarithm of zero.
//! It absorbs under addition, is neutral under `max`, and `exp(NEG_INF) = 0`.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::grad_check;
pub use graph::{Activations, Graph, MaxPlusGeometry, Var};
pub use kernels::ConvGeometry;

use crate::error::{Error, Result};

/// Log-domain representation of zero magnitude.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        debug_assert!(data.iter().all(|v| !v.is_nan()), "NaN stored in tensor");
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels that already guarantee consistency.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| !v.is_nan()), "NaN stored in tensor");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing infinities exactly.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::shape(
            "Tensor",
            format!("rank {} exceeds {MAX_RANK}", shape.len()),
        ));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "Tensor",
            format!("dimensions must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}
