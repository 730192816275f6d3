//! Dense rank-2 tensors and reverse-mode automatic differentiation.
//!
//! The submodules split the concern: [`graph`] holds the append-only
//! operation tape and its backward pass, [`store`] owns named parameters
//! and the Adam optimizer state, [`checkpoint`] (de)serializes parameters
//! to a small binary container.
//!
//! All values are `f64` in row-major order. Every operation validates its
//! result and returns a numeric error the moment a NaN or infinity
//! appears, so failures surface at the op that produced them rather than
//! at the end of a training run.

pub mod checkpoint;
pub mod graph;
pub mod store;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Gradients, Value};
pub use store::{adam_step, AdamState, ParamId, ParamStore};

use crate::error::{Error, Result};

/// A dense row-major matrix of `f64` values.
///
/// The shape is stored as a dimension sequence; every operation in this
/// crate works on rank-2 shapes (`rows x cols`), with scalars represented
/// as `1 x 1` and column vectors as `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a matrix, validating the element count and that every entry
    /// is finite.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "tensor {rows}x{cols} constructed with non-finite values"
            )));
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// A matrix of zeros.
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    /// A `1 x 1` tensor holding one value.
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::matrix(1, 1, vec![v])
    }

    /// Build from row slices (all rows must share one width).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows in tensor construction"));
        }
        Tensor::matrix(r, c, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "item() on a tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// One row as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
