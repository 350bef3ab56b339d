//! Outlier self-absorption: `W′ = W + β·N`.
//!
//! For each output channel `i` the coefficients `b_i` minimize
//!
//! ```text
//! J(b) = ½ Σ_j s_ij (W_ij + bᵀn_j)² + ½μ₁‖b‖² + ½μ₂(bᵀv)²,   v = N·1
//! ```
//!
//! where `s_i` is a temperature softmax of `|W_i|` that concentrates weight on
//! the row's largest entries. Setting the gradient `A_i b + ρ_i` to zero gives
//! the closed form `b* = −A_i⁻¹ρ_i` with
//! `A_i = Σ_j s_ij n_j n_jᵀ + μ₁I + μ₂vvᵀ ⪰ μ₁I` and `ρ_i = Σ_j s_ij W_ij n_j`.
//! Because the rows of `N` span low-curvature Hessian directions, the
//! second-order loss change `½ Σ_i ΔW_iᵀ H ΔW_i` stays near zero.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{cholesky_solve, max_abs, LinalgError, Matrix};
use crate::nullspace::{KRule, NullSpaceBasis, DEFAULT_GAMMA};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbsorbError {
    #[error("invalid absorb config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("null space is empty; nothing to assemble")]
    EmptyBasis,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Softmax temperature, relative to each row's max `|W|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    /// `τ_i = tau_rel · max_j |W_ij|`.
    Relative(f64),
    /// Plain ℓ2 objective: `s_j = 1/N`.
    Uniform,
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Temperature::Relative(t) => write!(f, "{t}"),
            Temperature::Uniform => f.write_str("uniform"),
        }
    }
}

impl FromStr for Temperature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "uniform" {
            return Ok(Temperature::Uniform);
        }
        s.parse::<f64>()
            .map(Temperature::Relative)
            .map_err(|_| format!("temperature must be a number or \"uniform\", got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorbConfig {
    pub tau: Temperature,
    pub mu1: f64,
    pub mu2: f64,
    pub gamma: f64,
    pub rule: KRule,
}

impl Default for AbsorbConfig {
    fn default() -> Self {
        Self {
            tau: Temperature::Relative(0.05),
            mu1: 1e-4,
            mu2: 1e-2,
            gamma: DEFAULT_GAMMA,
            rule: KRule::StayBelow,
        }
    }
}

impl AbsorbConfig {
    pub fn validate(&self) -> Result<(), AbsorbError> {
        if let Temperature::Relative(t) = self.tau {
            if !(t > 0.0 && t <= 10.0) {
                return Err(AbsorbError::InvalidConfig(format!("tau_rel must be in (0, 10], got {t}")));
            }
        }
        if !(self.mu1 > 0.0 && self.mu1.is_finite()) {
            return Err(AbsorbError::InvalidConfig(format!("mu1 must be positive, got {}", self.mu1)));
        }
        if !(self.mu2 > 0.0 && self.mu2.is_finite()) {
            return Err(AbsorbError::InvalidConfig(format!("mu2 must be positive, got {}", self.mu2)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AbsorbError::InvalidConfig(format!(
                "gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `s_j ∝ exp(|w_j|/τ − max_t |w_t|/τ)`, normalized to sum 1.
pub fn softmax_weights<T: Real>(w_row: &[T], tau: T) -> Vec<T> {
    let max = max_abs(w_row);
    let mut s: Vec<T> = w_row.iter().map(|w| ((w.abs() - max) / tau).exp()).collect();
    let total = s.iter().fold(T::zero(), |a, &b| a + b);
    s.iter_mut().for_each(|x| *x /= total);
    s
}

pub fn uniform_weights<T: Real>(n: usize) -> Vec<T> {
    vec![T::one() / T::lit(n as f64); n]
}

/// Channel weights under `tau`, with the temperature floor for all-zero rows.
pub fn channel_weights<T: Real>(w_row: &[T], tau: Temperature) -> Vec<T> {
    match tau {
        Temperature::Uniform => uniform_weights(w_row.len()),
        Temperature::Relative(rel) => {
            let t = (T::lit(rel) * max_abs(w_row)).max(T::lit(1e-8));
            softmax_weights(w_row, t)
        }
    }
}

/// `A b = −ρ` for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquation<T> {
    pub a: Matrix<T>,
    pub rho: Vec<T>,
}

/// Basis columns `n_j` laid out contiguously (`N × K`), plus `v = N·1`.
struct Columns<T> {
    cols: Matrix<T>,
    v: Vec<T>,
}

impl<T: Real> Columns<T> {
    fn new(basis: &NullSpaceBasis<T>) -> Self {
        Self {
            cols: basis.basis.transpose(),
            v: basis.column_sum(),
        }
    }

    fn k(&self) -> usize {
        self.cols.cols()
    }

    fn assemble(&self, s: &[T], w_row: &[T], mu1: T, mu2: T) -> NormalEquation<T> {
        let k = self.k();
        let mut a = Matrix::zeros(k, k);
        let mut rho = vec![T::zero(); k];
        for (j, n_j) in self.cols.row_iter().enumerate() {
            let sj = s[j];
            let swj = sj * w_row[j];
            for p in 0..k {
                let sp = sj * n_j[p];
                rho[p] += swj * n_j[p];
                let a_row = a.row_mut(p);
                for q in p..k {
                    a_row[q] += sp * n_j[q];
                }
            }
        }
        for p in 0..k {
            for q in p..k {
                let mut val = a[(p, q)] + mu2 * self.v[p] * self.v[q];
                if p == q {
                    val += mu1;
                }
                a[(p, q)] = val;
                a[(q, p)] = val;
            }
        }
        NormalEquation { a, rho }
    }

    /// `ΔW_i = bᵀN`.
    fn delta(&self, b: &[T]) -> Vec<T> {
        self.cols
            .row_iter()
            .map(|n_j| n_j.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y))
            .collect()
    }
}

fn check_dims<T: Real>(s: &[T], w_row: &[T], basis: &NullSpaceBasis<T>) -> Result<(), AbsorbError> {
    let n = basis.ambient_dim();
    if w_row.len() != n {
        return Err(AbsorbError::DimMismatch {
            what: "weight row length",
            expected: n,
            got: w_row.len(),
        });
    }
    if s.len() != n {
        return Err(AbsorbError::DimMismatch {
            what: "softmax weight length",
            expected: n,
            got: s.len(),
        });
    }
    Ok(())
}

pub fn assemble_normal_equation<T: Real>(
    s: &[T],
    w_row: &[T],
    basis: &NullSpaceBasis<T>,
    mu1: T,
    mu2: T,
) -> Result<NormalEquation<T>, AbsorbError> {
    check_dims(s, w_row, basis)?;
    if basis.is_empty() {
        return Err(AbsorbError::EmptyBasis);
    }
    Ok(Columns::new(basis).assemble(s, w_row, mu1, mu2))
}

/// `b* = −A⁻¹ρ`.
pub fn solve_channel<T: Real>(eq: &NormalEquation<T>) -> Result<Vec<T>, AbsorbError> {
    let x = cholesky_solve(&eq.a, &eq.rho)?;
    Ok(x.into_iter().map(|v| -v).collect())
}

/// `J(b)` for one channel.
pub fn channel_objective<T: Real>(
    s: &[T],
    w_row: &[T],
    basis: &NullSpaceBasis<T>,
    b: &[T],
    mu1: T,
    mu2: T,
) -> T {
    let half = T::lit(0.5);
    let fit = (0..w_row.len()).fold(T::zero(), |acc, j| {
        let proj = (0..b.len()).fold(T::zero(), |p, k| p + b[k] * basis.basis[(k, j)]);
        let r = w_row[j] + proj;
        acc + s[j] * r * r
    });
    let v = basis.column_sum();
    let btv = b.iter().zip(&v).fold(T::zero(), |a, (&x, &y)| a + x * y);
    let bb = b.iter().fold(T::zero(), |a, &x| a + x * x);
    half * fit + half * mu1 * bb + half * mu2 * btv * btv
}

/// Analytic gradient `∇J(b) = A b + ρ`.
pub fn objective_gradient<T: Real>(eq: &NormalEquation<T>, b: &[T]) -> Vec<T> {
    let ab = eq.a.matvec(b).expect("b has length K");
    ab.iter().zip(&eq.rho).map(|(&x, &r)| x + r).collect()
}

/// Per-channel outcome of the absorption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDiagnostics {
    /// `J(0)`.
    pub objective_before: f64,
    /// `J(b*)`.
    pub objective_after: f64,
    pub linf_before: f64,
    pub linf_after: f64,
    /// `|Σ_j ΔW_ij|`.
    pub shift: f64,
}

#[derive(Debug, Clone)]
pub struct AbsorbResult<T> {
    /// `M × K`.
    pub beta: Matrix<T>,
    /// `M × N`, equal to `β·N`.
    pub delta_w: Matrix<T>,
    /// `W + ΔW`.
    pub w_prime: Matrix<T>,
    pub channels: Vec<ChannelDiagnostics>,
    /// `½ Σ_i ΔW_iᵀ H ΔW_i`.
    pub quadratic_perturbation: f64,
}

impl<T: Real> AbsorbResult<T> {
    pub fn k(&self) -> usize {
        self.beta.cols()
    }

    /// Fraction of rows whose ℓ∞ did not grow.
    pub fn linf_non_increasing_fraction(&self) -> f64 {
        if self.channels.is_empty() {
            return 1.0;
        }
        let ok = self
            .channels
            .iter()
            .filter(|c| c.linf_after <= c.linf_before)
            .count();
        ok as f64 / self.channels.len() as f64
    }
}

/// Absorbs outliers of every output channel of `w` into the null space `basis`.
pub fn absorb_layer<T: Real>(
    w: &Matrix<T>,
    basis: &NullSpaceBasis<T>,
    h: &Matrix<T>,
    cfg: &AbsorbConfig,
) -> Result<AbsorbResult<T>, AbsorbError> {
    cfg.validate()?;
    let (m, n) = w.shape();
    if basis.ambient_dim() != n {
        return Err(AbsorbError::DimMismatch {
            what: "null-space ambient dimension",
            expected: n,
            got: basis.ambient_dim(),
        });
    }
    if h.shape() != (n, n) {
        return Err(AbsorbError::DimMismatch {
            what: "Hessian size",
            expected: n,
            got: h.rows(),
        });
    }
    let k = basis.k();
    let mu1 = T::lit(cfg.mu1);
    let mu2 = T::lit(cfg.mu2);

    if k == 0 {
        let channels = w
            .row_iter()
            .map(|row| {
                let s = channel_weights(row, cfg.tau);
                let j0 = channel_objective(&s, row, basis, &[], mu1, mu2).to_f64_lossless();
                let linf = max_abs(row).to_f64_lossless();
                ChannelDiagnostics {
                    objective_before: j0,
                    objective_after: j0,
                    linf_before: linf,
                    linf_after: linf,
                    shift: 0.0,
                }
            })
            .collect();
        return Ok(AbsorbResult {
            beta: Matrix::zeros(m, 0),
            delta_w: Matrix::zeros(m, n),
            w_prime: w.clone(),
            channels,
            quadratic_perturbation: 0.0,
        });
    }

    let cols = Columns::new(basis);
    let solved: Vec<(Vec<T>, Vec<T>, ChannelDiagnostics)> = (0..m)
        .into_par_iter()
        .map(|i| -> Result<_, AbsorbError> {
            let row = w.row(i);
            let s = channel_weights(row, cfg.tau);
            let eq = cols.assemble(&s, row, mu1, mu2);
            let b = solve_channel(&eq)?;
            let delta = cols.delta(&b);
            let after: Vec<T> = row.iter().zip(&delta).map(|(&x, &d)| x + d).collect();
            let zeros = vec![T::zero(); k];
            let diag = ChannelDiagnostics {
                objective_before: channel_objective(&s, row, basis, &zeros, mu1, mu2).to_f64_lossless(),
                objective_after: channel_objective(&s, row, basis, &b, mu1, mu2).to_f64_lossless(),
                linf_before: max_abs(row).to_f64_lossless(),
                linf_after: max_abs(&after).to_f64_lossless(),
                shift: delta
                    .iter()
                    .fold(T::zero(), |a, &d| a + d)
                    .abs()
                    .to_f64_lossless(),
            };
            Ok((b, delta, diag))
        })
        .collect::<Result<_, _>>()?;

    let mut beta = Matrix::zeros(m, k);
    let mut delta_w = Matrix::zeros(m, n);
    let mut channels = Vec::with_capacity(m);
    for (i, (b, d, diag)) in solved.into_iter().enumerate() {
        beta.row_mut(i).copy_from_slice(&b);
        delta_w.row_mut(i).copy_from_slice(&d);
        channels.push(diag);
    }
    let w_prime = w.add(&delta_w)?;
    let quadratic_perturbation = loss_perturbation_audit(&delta_w, h)?;
    Ok(AbsorbResult {
        beta,
        delta_w,
        w_prime,
        channels,
        quadratic_perturbation,
    })
}

/// Second-order loss change `½ Σ_i ΔW_iᵀ H ΔW_i` under the block-diagonal layer Hessian.
pub fn loss_perturbation_audit<T: Real>(delta_w: &Matrix<T>, h: &Matrix<T>) -> Result<f64, AbsorbError> {
    let n = delta_w.cols();
    if h.shape() != (n, n) {
        return Err(AbsorbError::DimMismatch {
            what: "Hessian size",
            expected: n,
            got: h.rows(),
        });
    }
    let mut total = 0.0;
    for row in delta_w.row_iter() {
        if row.iter().all(|x| *x == T::zero()) {
            continue;
        }
        let hd = h.matvec(row)?;
        total += row
            .iter()
            .zip(&hd)
            .map(|(&a, &b)| a.to_f64_lossless() * b.to_f64_lossless())
            .sum::<f64>();
    }
    Ok(0.5 * total)
}
