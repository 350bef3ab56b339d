//! Per-layer proxy Hessian `H = (2/n) Σ xᵀx` accumulated from captured layer inputs.
//!
//! The same `N × N` block is shared by every output channel of the layer.
//! Accumulation is always in `f64`; no damping is applied here.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HessianError {
    #[error("{layer}: batch has {got} columns, accumulator expects {expected}")]
    DimMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("{layer}: calibration batch contains NaN or infinite values")]
    NonFinite { layer: String },
    #[error("{layer}: no calibration samples were accumulated")]
    EmptyCalibration { layer: String },
    #[error("cannot merge accumulators for {left:?} and {right:?}")]
    MergeMismatch { left: String, right: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    layer: String,
    sum_xx: Matrix<f64>,
    samples: usize,
}

impl HessianAccumulator {
    pub fn new(layer: impl Into<String>, dim: usize) -> Self {
        Self {
            layer: layer.into(),
            sum_xx: Matrix::zeros(dim, dim),
            samples: 0,
        }
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn dim(&self) -> usize {
        self.sum_xx.rows()
    }

    pub fn sample_count(&self) -> usize {
        self.samples
    }

    pub fn sum_xx(&self) -> &Matrix<f64> {
        &self.sum_xx
    }

    /// `sum_xx += xᵀx`, `sample_count += rows`.
    pub fn update<T: Real>(&mut self, x: &Matrix<T>) -> Result<(), HessianError> {
        if x.rows() == 0 {
            return Ok(());
        }
        if x.cols() != self.dim() {
            return Err(HessianError::DimMismatch {
                layer: self.layer.clone(),
                expected: self.dim(),
                got: x.cols(),
            });
        }
        if !x.all_finite() {
            return Err(HessianError::NonFinite {
                layer: self.layer.clone(),
            });
        }
        let g = x.cast::<f64>().gram();
        for (s, v) in self.sum_xx.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *s += v;
        }
        self.sum_xx.symmetrize();
        self.samples += x.rows();
        Ok(())
    }

    /// Adds another worker's partial sums for the same layer.
    pub fn merge(&mut self, other: &HessianAccumulator) -> Result<(), HessianError> {
        if other.layer != self.layer || other.dim() != self.dim() {
            return Err(HessianError::MergeMismatch {
                left: self.layer.clone(),
                right: other.layer.clone(),
            });
        }
        for (s, v) in self
            .sum_xx
            .as_mut_slice()
            .iter_mut()
            .zip(other.sum_xx.as_slice())
        {
            *s += v;
        }
        self.samples += other.samples;
        Ok(())
    }

    /// `H = (2 / sample_count) · sum_xx`.
    pub fn finalize(&self) -> Result<Matrix<f64>, HessianError> {
        if self.samples == 0 {
            return Err(HessianError::EmptyCalibration {
                layer: self.layer.clone(),
            });
        }
        let mut h = self.sum_xx.scale(2.0 / self.samples as f64);
        h.symmetrize();
        Ok(h)
    }
}

/// Functional form of [`HessianAccumulator::update`].
pub fn hessian_update<T: Real>(
    mut acc: HessianAccumulator,
    x_batch: &Matrix<T>,
) -> Result<HessianAccumulator, HessianError> {
    acc.update(x_batch)?;
    Ok(acc)
}

pub fn hessian_finalize(acc: &HessianAccumulator) -> Result<Matrix<f64>, HessianError> {
    acc.finalize()
}
