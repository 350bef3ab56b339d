//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the solver paths under test.
#![allow(dead_code)]

use osaq::linalg::{Matrix, Rng};
use osaq::nullspace::NullSpaceBasis;

/// Rows orthonormalized by modified Gram-Schmidt (twice, for stability).
pub fn orthonormal_rows(k: usize, n: usize, rng: &mut Rng) -> Matrix<f64> {
    assert!(k <= n);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = rng.normal_vec(n);
        for _ in 0..2 {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_rows(&rows)
}

/// `H = Qᵀ diag(λ) Q` with the first `null` eigenvalues exactly zero.
/// Returns the Hessian and its exact null-space rows.
pub fn rank_deficient_hessian(n: usize, null: usize, rng: &mut Rng) -> (Matrix<f64>, Matrix<f64>) {
    let q = orthonormal_rows(n, n, rng);
    let lambda: Vec<f64> = (0..n)
        .map(|i| if i < null { 0.0 } else { 0.5 + 2.0 * rng.uniform() })
        .collect();
    let h = Matrix::from_fn(n, n, |a, b| (0..n).map(|i| q[(i, a)] * lambda[i] * q[(i, b)]).sum());
    (h, q.row_range(0, null))
}

/// Random positive definite matrix `GᵀG/m + δI`.
pub fn random_spd(n: usize, rng: &mut Rng, delta: f64) -> Matrix<f64> {
    let m = n + 4;
    let g = Matrix::from_fn(m, n, |_, _| rng.normal());
    Matrix::from_fn(n, n, |a, b| {
        (0..m).map(|i| g[(i, a)] * g[(i, b)]).sum::<f64>() / m as f64 + if a == b { delta } else { 0.0 }
    })
}

/// Weight row with a few planted outliers.
pub fn outlier_row(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| 0.02 * rng.normal()).collect();
    for _ in 0..1 + rng.below(2) {
        let j = rng.below(n);
        w[j] = if rng.bernoulli(0.5) { 0.4 } else { -0.4 } * (0.5 + rng.uniform());
    }
    w
}

/// Objective written directly from its definition:
/// `½Σ s_j (w_j + (Nᵀb)_j)² + ½μ₁‖b‖² + ½μ₂(Σ_j (Nᵀb)_j)²`.
pub fn objective(s: &[f64], w: &[f64], basis: &Matrix<f64>, b: &[f64], mu1: f64, mu2: f64) -> f64 {
    let delta = delta_row(basis, b);
    let fit: f64 = (0..w.len()).map(|j| s[j] * (w[j] + delta[j]).powi(2)).sum();
    let shift: f64 = delta.iter().sum();
    0.5 * fit + 0.5 * mu1 * b.iter().map(|x| x * x).sum::<f64>() + 0.5 * mu2 * shift * shift
}

/// Gradient of [`objective`] by the chain rule through `Δ = Nᵀb`.
pub fn objective_grad(s: &[f64], w: &[f64], basis: &Matrix<f64>, b: &[f64], mu1: f64, mu2: f64) -> Vec<f64> {
    let delta = delta_row(basis, b);
    let shift: f64 = delta.iter().sum();
    (0..b.len())
        .map(|k| {
            let row = basis.row(k);
            let fit: f64 = (0..w.len()).map(|j| s[j] * (w[j] + delta[j]) * row[j]).sum();
            fit + mu1 * b[k] + mu2 * shift * row.iter().sum::<f64>()
        })
        .collect()
}

pub fn delta_row(basis: &Matrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = basis.cols();
    (0..n).map(|j| (0..b.len()).map(|k| b[k] * basis[(k, j)]).sum()).collect()
}

/// Accelerated projected gradient descent on the channel objective over the
/// ball `‖b‖ ≤ radius`. The radius is chosen far outside the minimizer, so the
/// projection only guards against divergence.
pub fn pgd_minimize(s: &[f64], w: &[f64], basis: &Matrix<f64>, mu1: f64, mu2: f64) -> Vec<f64> {
    let k = basis.rows();
    // Lipschitz bound: ‖NᵀSN‖ ≤ max s (orthonormal rows), plus ridge and shift terms.
    let v: Vec<f64> = (0..k).map(|i| basis.row(i).iter().sum()).collect();
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let lip = smax + mu1 + mu2 * v.iter().map(|x| x * x).sum::<f64>();
    let step = 1.0 / lip;
    let radius = 1e6;
    let project = |b: &mut Vec<f64>| {
        let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > radius {
            b.iter_mut().for_each(|x| *x *= radius / norm);
        }
    };
    let mut x = vec![0.0; k];
    let mut fx = objective(s, w, basis, &x, mu1, mu2);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..200_000 {
        let g = objective_grad(s, w, basis, &y, mu1, mu2);
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-13 {
            break;
        }
        let mut next: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        project(&mut next);
        let fnext = objective(s, w, basis, &next, mu1, mu2);
        // Adaptive restart keeps the iteration monotone on ill-conditioned problems.
        if fnext > fx {
            if y == x {
                break;
            }
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        y = next.iter().zip(&x).map(|(n, o)| n + momentum * (n - o)).collect();
        x = next;
        fx = fnext;
        t = t_next;
    }
    x
}

/// Softmax weights computed directly, for cross-checking.
pub fn softmax(w: &[f64], tau: f64) -> Vec<f64> {
    let m = w.iter().map(|x| x.abs()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|x| ((x.abs() - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn basis(rows: Matrix<f64>) -> NullSpaceBasis<f64> {
    NullSpaceBasis::with_rows(rows)
}

/// `½ Σ_i dᵢᵀ H dᵢ` written out elementwise.
pub fn quadratic_form(d: &Matrix<f64>, h: &Matrix<f64>) -> f64 {
    let n = d.cols();
    let mut total = 0.0;
    for r in 0..d.rows() {
        for a in 0..n {
            for b in 0..n {
                total += d[(r, a)] * h[(a, b)] * d[(r, b)];
            }
        }
    }
    0.5 * total
}

/// Affine grid of one group written from the quantizer's definition.
pub fn grid_params(group: &[f64], bits: u32) -> (f64, i64) {
    let maxq = ((1u32 << bits) - 1) as f64;
    let lo = group.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = (hi - lo) / maxq;
    let z = (-lo / s).round_ties_even() as i64;
    (s, z)
}

/// Exhaustive search over the `2^b × 2^b` code pairs of a one-row, two-column
/// layer on its per-channel grid. Returns the smallest calibration output
/// error `Σ_t (x_tᵀ(w − ŵ))² / T` and the error of plain rounding.
pub fn exhaustive_two_column(w: [f64; 2], x: &Matrix<f64>, bits: u32) -> (f64, f64) {
    let maxq = (1i64 << bits) - 1;
    let (s, z) = grid_params(&w, bits);
    let deq = |c: i64| s * (c - z) as f64;
    let err = |q: [f64; 2]| {
        (0..x.rows())
            .map(|t| (x[(t, 0)] * (w[0] - q[0]) + x[(t, 1)] * (w[1] - q[1])).powi(2))
            .sum::<f64>()
            / x.rows() as f64
    };
    let mut best = f64::INFINITY;
    for c0 in 0..=maxq {
        for c1 in 0..=maxq {
            best = best.min(err([deq(c0), deq(c1)]));
        }
    }
    let round = |v: f64| ((v / s).round_ties_even() as i64 + z).clamp(0, maxq);
    (best, err([deq(round(w[0])), deq(round(w[1]))]))
}
