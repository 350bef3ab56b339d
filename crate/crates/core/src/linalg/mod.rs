//! Dense real linear algebra: symmetric eigensolver, Cholesky solves,
//! small singular value problems and a seedable normal generator.

mod cholesky;
mod eigen;
mod matrix;
mod rng;
mod svd;

pub use cholesky::{cholesky_solve, Cholesky};
pub use eigen::{eigh_symmetric, eigh_with, EigenDecomposition, JacobiOptions};
pub use matrix::{dot, max_abs, norm2, Matrix};
pub use rng::{rng_normal, Rng};
pub use svd::{singular_values_small, MAX_SMALL_SVD_DIM};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix contains NaN or infinite entries")]
    NonFinite,
    #[error("expected a square matrix, got {0:?}")]
    NotSquare((usize, usize)),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("data length {got} does not match shape product {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("Jacobi iteration did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension {dim} exceeds the small-matrix limit {max}")]
    TooLarge { dim: usize, max: usize },
}
