use super::{LinalgError, Matrix};
use crate::scalar::Real;

/// Eigenpairs of a symmetric matrix, ordered by non-decreasing `|λ|`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition<T> {
    /// Eigenvalues, `|values[i]| <= |values[i + 1]|`.
    pub values: Vec<T>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix<T>,
}

impl<T: Real> EigenDecomposition<T> {
    pub fn abs_values(&self) -> Vec<T> {
        self.values.iter().map(|v| v.abs()).collect()
    }

    /// `V · diag(values) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.values.len();
        let v = &self.vectors;
        Matrix::from_fn(n, n, |i, j| {
            (0..n).fold(T::zero(), |s, k| s + v[(i, k)] * self.values[k] * v[(j, k)])
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JacobiOptions {
    /// Converged once every off-diagonal entry is at most `tol · ‖H‖_F`.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for JacobiOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_sweeps: 100,
        }
    }
}

pub fn eigh_symmetric<T: Real>(h: &Matrix<T>) -> Result<EigenDecomposition<T>, LinalgError> {
    eigh_with(h, JacobiOptions::default())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized by averaging before rotating. Each eigenvector is
/// sign-normalized so that its largest-magnitude entry (lowest index on ties)
/// is positive.
pub fn eigh_with<T: Real>(
    h: &Matrix<T>,
    opts: JacobiOptions,
) -> Result<EigenDecomposition<T>, LinalgError> {
    if !h.is_square() {
        return Err(LinalgError::NotSquare(h.shape()));
    }
    if !h.all_finite() {
        return Err(LinalgError::NonFinite);
    }
    let asym_tol = T::tol(1e-9) * (T::one() + h.norm_inf());
    let asym = h.asymmetry();
    if asym > asym_tol {
        return Err(LinalgError::NotSymmetric(asym.to_f64_lossless()));
    }

    let n = h.rows();
    let mut a = h.clone();
    a.symmetrize();
    // rows of `vt` are the eigenvectors being accumulated
    let mut vt = Matrix::<T>::identity(n);

    let threshold = T::tol(opts.tol) * a.norm_fro();
    let mut converged = false;
    for _ in 0..=opts.max_sweeps {
        if max_off_diagonal(&a) <= threshold {
            converged = true;
            break;
        }
        sweep(&mut a, &mut vt, threshold);
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps: opts.max_sweeps,
        });
    }

    let diag: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        diag[i]
            .abs()
            .partial_cmp(&diag[j].abs())
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });

    let values = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let v = vt.row(src);
        let mut pivot = 0;
        for (k, x) in v.iter().enumerate() {
            if x.abs() > v[pivot].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot] < T::zero() { -T::one() } else { T::one() };
        for (k, &x) in v.iter().enumerate() {
            vectors[(k, col)] = sign * x;
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

fn max_off_diagonal<T: Real>(a: &Matrix<T>) -> T {
    let n = a.rows();
    let mut worst = T::zero();
    for p in 0..n {
        for &x in &a.row(p)[p + 1..] {
            worst = worst.max(x.abs());
        }
    }
    worst
}

fn sweep<T: Real>(a: &mut Matrix<T>, vt: &mut Matrix<T>, threshold: T) {
    let n = a.rows();
    let two = T::lit(2.0);
    for p in 0..n.saturating_sub(1) {
        for q in p + 1..n {
            let apq = a[(p, q)];
            if apq.abs() <= threshold {
                continue;
            }
            let app = a[(p, p)];
            let aqq = a[(q, q)];
            let theta = (aqq - app) / (two * apq);
            let t = if (theta * theta).is_infinite() {
                T::one() / (two * theta)
            } else {
                let mag = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
                if theta < T::zero() {
                    -mag
                } else {
                    mag
                }
            };
            let c = T::one() / (t * t + T::one()).sqrt();
            let s = t * c;

            let data = a.as_mut_slice();
            for k in 0..n {
                if k == p || k == q {
                    continue;
                }
                let akp = data[k * n + p];
                let akq = data[k * n + q];
                let new_p = c * akp - s * akq;
                let new_q = s * akp + c * akq;
                data[k * n + p] = new_p;
                data[p * n + k] = new_p;
                data[k * n + q] = new_q;
                data[q * n + k] = new_q;
            }
            data[p * n + p] = app - t * apq;
            data[q * n + q] = aqq + t * apq;
            data[p * n + q] = T::zero();
            data[q * n + p] = T::zero();

            let v = vt.as_mut_slice();
            for k in 0..n {
                let vp = v[p * n + k];
                let vq = v[q * n + k];
                v[p * n + k] = c * vp - s * vq;
                v[q * n + k] = s * vp + c * vq;
            }
        }
    }
}
