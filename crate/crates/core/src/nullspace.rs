//! Tail-energy null space of a layer Hessian and its stability across calibration sets.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::linalg::{eigh_symmetric, singular_values_small, LinalgError, Matrix};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NullSpaceError {
    #[error("eigenvalue spectrum is empty")]
    EmptySpectrum,
    #[error("tail-energy threshold must lie in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("eigenvalue magnitudes must be sorted non-decreasing")]
    Unsorted,
    #[error("stability needs non-empty null spaces (K1 = {k1}, K2 = {k2})")]
    EmptyNullSpace { k1: usize, k2: usize },
    #[error("null spaces live in different ambient dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// How the tail-energy threshold picks the null-space dimension `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KRule {
    /// Largest `K` whose prefix energy stays at or below `γ · total`.
    #[default]
    StayBelow,
    /// Smallest `K` whose prefix energy reaches `γ · total`.
    FirstReach,
}

impl KRule {
    pub fn as_str(self) -> &'static str {
        match self {
            KRule::StayBelow => "stay-below",
            KRule::FirstReach => "first-reach",
        }
    }
}

impl fmt::Display for KRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stay-below" => Ok(KRule::StayBelow),
            "first-reach" => Ok(KRule::FirstReach),
            other => Err(format!("unknown K rule {other:?} (expected stay-below or first-reach)")),
        }
    }
}

pub const DEFAULT_GAMMA: f64 = 1e-4;

/// `K × N` basis of the selected low-curvature directions.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceBasis<T> {
    /// Rows are unit eigenvectors, smallest `|λ|` first.
    pub basis: Matrix<T>,
    /// Full `|λ|` spectrum, non-decreasing.
    pub abs_eigenvalues: Vec<T>,
    pub gamma: f64,
    pub rule: KRule,
}

impl<T: Real> NullSpaceBasis<T> {
    pub fn k(&self) -> usize {
        self.basis.rows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.k() == 0
    }

    /// `|λ_K|`, the largest selected curvature (0 when `K = 0`).
    pub fn largest_selected(&self) -> T {
        if self.is_empty() {
            T::zero()
        } else {
            self.abs_eigenvalues[self.k() - 1]
        }
    }

    pub fn largest_eigenvalue(&self) -> T {
        self.abs_eigenvalues.last().copied().unwrap_or_else(T::zero)
    }

    /// Basis for the null space given a fixed `K` (no threshold); used by tests and tools.
    pub fn with_rows(basis: Matrix<T>) -> Self {
        let k = basis.rows();
        Self {
            basis,
            abs_eigenvalues: vec![T::zero(); k],
            gamma: 0.0,
            rule: KRule::StayBelow,
        }
    }

    /// `v = N · 1`.
    pub fn column_sum(&self) -> Vec<T> {
        self.basis
            .row_iter()
            .map(|r| r.iter().fold(T::zero(), |s, &x| s + x))
            .collect()
    }
}

fn check_gamma(gamma: f64) -> Result<(), NullSpaceError> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(NullSpaceError::InvalidGamma(gamma))
    }
}

/// Null-space dimension from a sorted `|λ|` spectrum.
pub fn select_k<T: Real>(abs_eigenvalues: &[T], gamma: f64, rule: KRule) -> Result<usize, NullSpaceError> {
    if abs_eigenvalues.is_empty() {
        return Err(NullSpaceError::EmptySpectrum);
    }
    check_gamma(gamma)?;
    let mags: Vec<f64> = abs_eigenvalues.iter().map(|x| x.to_f64_lossless().abs()).collect();
    if mags.windows(2).any(|w| w[0] > w[1]) {
        return Err(NullSpaceError::Unsorted);
    }
    let threshold = gamma * mags.iter().sum::<f64>();
    let mut prefix = 0.0;
    match rule {
        KRule::StayBelow => {
            let mut k = 0;
            for &m in &mags {
                prefix += m;
                if prefix > threshold {
                    break;
                }
                k += 1;
            }
            Ok(k)
        }
        KRule::FirstReach => {
            for (i, &m) in mags.iter().enumerate() {
                prefix += m;
                if prefix >= threshold {
                    return Ok(i + 1);
                }
            }
            Ok(mags.len())
        }
    }
}

/// Eigendecomposes `h` and keeps the `K` eigenvectors of smallest `|λ|` as rows.
pub fn extract_nullspace<T: Real>(
    h: &Matrix<T>,
    gamma: f64,
    rule: KRule,
) -> Result<NullSpaceBasis<T>, NullSpaceError> {
    check_gamma(gamma)?;
    let eig = eigh_symmetric(h)?;
    let abs_eigenvalues = eig.abs_values();
    let k = select_k(&abs_eigenvalues, gamma, rule)?;
    let n = h.rows();
    let basis = Matrix::from_fn(k, n, |i, j| eig.vectors[(j, i)]);
    Ok(NullSpaceBasis {
        basis,
        abs_eigenvalues,
        gamma,
        rule,
    })
}

/// Principal-angle cosines between two null spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub layer: String,
    /// Singular values of `N₁·N₂ᵀ`, non-increasing.
    pub singular_values: Vec<f64>,
    pub k1: usize,
    pub k2: usize,
}

impl StabilityReport {
    pub fn max_singular_value(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

pub fn stability<T: Real>(
    layer: &str,
    n1: &NullSpaceBasis<T>,
    n2: &NullSpaceBasis<T>,
) -> Result<StabilityReport, NullSpaceError> {
    if n1.ambient_dim() != n2.ambient_dim() {
        return Err(NullSpaceError::DimMismatch(n1.ambient_dim(), n2.ambient_dim()));
    }
    if n1.is_empty() || n2.is_empty() {
        return Err(NullSpaceError::EmptyNullSpace {
            k1: n1.k(),
            k2: n2.k(),
        });
    }
    let cross = n1.basis.cast::<f64>().matmul_t(&n2.basis.cast::<f64>())?;
    Ok(StabilityReport {
        layer: layer.to_string(),
        singular_values: singular_values_small(&cross)?,
        k1: n1.k(),
        k2: n2.k(),
    })
}

/// Cumulative `|λ|` fractions for `k = 1..=N`.
pub fn tail_energy_curve<T: Real>(abs_eigenvalues: &[T]) -> Vec<(usize, f64)> {
    let mags: Vec<f64> = abs_eigenvalues.iter().map(|x| x.to_f64_lossless().abs()).collect();
    let total: f64 = mags.iter().sum();
    let mut prefix = 0.0;
    mags.iter()
        .enumerate()
        .map(|(i, &m)| {
            prefix += m;
            let frac = if total > 0.0 { (prefix / total).min(1.0) } else { 1.0 };
            (i + 1, frac)
        })
        .collect()
}
