//! Tensor arithmetic with reverse-mode differentiation.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, Differentiable, TapeFn};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TENSOR_MAGIC};
pub(crate) use tensor::read_u32;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated tensor data")]
    Truncated,
    #[error("i/o error: {0}")]
    Io(String),
}

/// Plain (untaped) row softmax of a `[m×n]` tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumError> {
    if x.rank() != 2 {
        return Err(NumError::Shape(format!("softmax_rows expects rank 2, got {:?}", x.shape())));
    }
    let n = x.cols();
    let mut out = vec![0.0; x.numel()];
    for (row, o) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        kernels::softmax_into(row, o);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Exact GELU on a scalar.
pub fn gelu(x: f64) -> f64 {
    kernels::gelu(x)
}
