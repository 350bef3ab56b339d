use super::{eigh_symmetric, LinalgError, Matrix};
use crate::scalar::Real;

pub const MAX_SMALL_SVD_DIM: usize = 256;

/// Singular values (non-increasing) via the eigenvalues of the smaller Gram matrix.
pub fn singular_values_small<T: Real>(m: &Matrix<T>) -> Result<Vec<T>, LinalgError> {
    if !m.all_finite() {
        return Err(LinalgError::NonFinite);
    }
    let k = m.rows().min(m.cols());
    if k > MAX_SMALL_SVD_DIM {
        return Err(LinalgError::TooLarge {
            dim: k,
            max: MAX_SMALL_SVD_DIM,
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let gram = if m.cols() <= m.rows() {
        m.gram()
    } else {
        m.matmul_t(m)?
    };
    let eig = eigh_symmetric(&gram)?;
    let mut sv: Vec<T> = eig.values.iter().map(|&l| l.max(T::zero()).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    Ok(sv)
}
