//! Dense matrix exponential, general real eigendecomposition and a few
//! small helpers around them.

mod complex;
mod eig;
mod expm;

pub use complex::CMatrix;
pub use eig::{eig, EigenPairs, SWEEPS_PER_DIM};
pub use expm::{
    evolve, expm, expm_on_tape, squaring_count, EVOLVE_T_SLACK, EXPM_NORM_LIMIT, TAYLOR_DEGREE,
};
pub use num_complex::Complex64;

use thiserror::Error;

use crate::ndcore::{NdError, Tensor};

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("expected a square matrix, got shape {0:?}")]
    NotSquare(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("matrix 1-norm {norm1:.3e} exceeds the exponential guard {EXPM_NORM_LIMIT}")]
    ExpmOverflow { norm1: f64 },
    #[error("evolution time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("QR iteration did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix is singular")]
    Singular,
    #[error(transparent)]
    Nd(#[from] NdError),
}

/// Determinant by LU with partial pivoting.
pub fn det(a: &Tensor) -> Result<f64, LinalgError> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(LinalgError::NotSquare(s.to_vec()));
    }
    let n = s[0];
    let mut m = a.data().to_vec();
    let mut det = 1.0;
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs()))
            .unwrap_or(k);
        let p = m[piv * n + k];
        if p == 0.0 {
            return Ok(0.0);
        }
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
            det = -det;
        }
        det *= p;
        for i in k + 1..n {
            let f = m[i * n + k] / p;
            for j in k + 1..n {
                m[i * n + j] -= f * m[k * n + j];
            }
        }
    }
    Ok(det)
}

/// Rebuilds `P Λ P⁻¹` from eigenpairs (real part of the product).
pub fn reconstruct(pairs: &EigenPairs) -> Result<Tensor, LinalgError> {
    let n = pairs.len();
    let p = &pairs.vectors;
    let pinv = p.inverse()?;
    let mut pl = p.clone();
    for j in 0..n {
        for i in 0..n {
            pl[(i, j)] *= pairs.values[j];
        }
    }
    let full = pl.matmul(&pinv);
    Ok(Tensor::from_fn(n, n, |i, j| full[(i, j)].re))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_of_small_matrices() {
        let a = Tensor::from_rows(&[[0.0, 2.0], [3.0, 1.0]]);
        assert!((det(&a).unwrap() + 6.0).abs() < 1e-15);
        assert_eq!(det(&Tensor::eye(5)).unwrap(), 1.0);
    }

    #[test]
    fn reconstruct_round_trip() {
        let a = Tensor::from_rows(&[[0.5, -1.0, 0.2], [1.3, 0.1, 0.0], [-0.4, 0.7, -0.9]]);
        let back = reconstruct(&eig(&a).unwrap()).unwrap();
        assert!(back.sub(&a).frobenius_norm() < 1e-12);
    }
}
