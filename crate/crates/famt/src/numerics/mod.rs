//! Dense f64 tensors and a define-by-run reverse-mode gradient tape.
//!
//! The engine covers exactly the primitives the transformer and trainer need:
//! matmul, softmax, layer/batch norm, GELU, gathers/assemblies over rows,
//! column slicing and concatenation, reductions, and cross-entropy. Tensors
//! are row-major and always 64-bit.

pub mod tape;

pub use tape::{Tape, ValueId};

use crate::error::{Error, Result};
use crate::rng::KeyedRng;

/// Dense row-major tensor with optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements but data has {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Truncated-normal init (two standard deviations), the conventional
    /// transformer weight initialization.
    pub fn trunc_normal(dims: &[usize], std: f64, rng: &mut KeyedRng) -> Self {
        let numel: usize = dims.iter().product();
        let data = (0..numel).map(|_| rng.trunc_normal(std)).collect();
        Tensor { dims: dims.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as a single row).
    pub fn rows(&self) -> usize {
        if self.dims.len() == 2 {
            self.dims[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor with dims {:?}",
                grad.len(),
                self.dims
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}
