use crate::ndcore::{Tape, Tensor, Var};

use super::LinalgError;

/// Degree of the Taylor polynomial applied to the scaled matrix.
pub const TAYLOR_DEGREE: usize = 12;

/// Above this 1-norm `e^A` may overflow `f64`; refused outright.
pub const EXPM_NORM_LIMIT: f64 = 700.0;

/// Number of squarings: `max(0, ⌈log₂‖A‖₁⌉ + 4)`, so the scaled matrix has
/// 1-norm at most 1/16.
pub fn squaring_count(norm1: f64) -> u32 {
    if norm1 <= 0.0 {
        return 0;
    }
    (norm1.log2().ceil() + 4.0).max(0.0) as u32
}

fn check_square(a: &Tensor) -> Result<usize, LinalgError> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(LinalgError::NotSquare(s.to_vec()));
    }
    Ok(s[0])
}

fn check_norm(a: &Tensor) -> Result<f64, LinalgError> {
    a.check_finite("matrix")?;
    let norm = a.norm1();
    if norm > EXPM_NORM_LIMIT {
        return Err(LinalgError::ExpmOverflow { norm1: norm });
    }
    Ok(norm)
}

/// Matrix exponential by scaling and squaring around a truncated Taylor
/// series.
pub fn expm(a: &Tensor) -> Result<Tensor, LinalgError> {
    let n = check_square(a)?;
    let s = squaring_count(check_norm(a)?);
    let b = a.scale(0.5f64.powi(s as i32));
    let eye = Tensor::eye(n);
    // Horner: I + B(I + B/2(I + B/3(...)))
    let mut p = eye.clone();
    for k in (1..=TAYLOR_DEGREE).rev() {
        p = b.matmul(&p).scale(1.0 / k as f64);
        p.add_assign(&eye);
    }
    for _ in 0..s {
        p = p.matmul(&p);
    }
    Ok(p)
}

/// [`expm`] recorded on a tape so gradients flow through the series and
/// the squarings. The squaring count is taken from the current value.
pub fn expm_on_tape<'t>(tape: &'t Tape, a: Var<'t>) -> Result<Var<'t>, LinalgError> {
    let (n, s) = {
        let v = a.value();
        (check_square(&v)?, squaring_count(check_norm(&v)?))
    };
    let b = a.scale(0.5f64.powi(s as i32));
    let eye = tape.constant(Tensor::eye(n));
    let mut p = eye;
    for k in (1..=TAYLOR_DEGREE).rev() {
        p = b.matmul(p).scale(1.0 / k as f64).add(eye);
    }
    for _ in 0..s {
        p = p.matmul(p);
    }
    Ok(p)
}

/// `z_t = z0 · e^{L t}ᵀ`, one shared exponential for the whole batch
/// (rows of `z0` are observables).
pub fn evolve(l: &Tensor, z0: &Tensor, t: f64) -> Result<Tensor, LinalgError> {
    let n = check_square(l)?;
    if z0.cols() != n {
        return Err(LinalgError::DimMismatch {
            expected: n,
            got: z0.cols(),
        });
    }
    if !(0.0..=1.0 + EVOLVE_T_SLACK).contains(&t) {
        return Err(LinalgError::TimeOutOfRange(t));
    }
    let e = expm(&l.scale(t))?;
    Ok(z0.matmul_bt(&e))
}

/// Evolution times may exceed 1 by this much.
pub const EVOLVE_T_SLACK: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zero_gives_identity() {
        assert_eq!(expm(&Tensor::zeros([4, 4])).unwrap(), Tensor::eye(4));
    }

    #[test]
    fn diagonal() {
        let a = Tensor::from_rows(&[[1.0, 0.0], [0.0, -1.0]]);
        let e = expm(&a).unwrap();
        assert!((e.get(0, 0) - std::f64::consts::E).abs() < 1e-14);
        assert!((e.get(1, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(e.get(0, 1), 0.0);
    }

    #[test]
    fn quarter_rotation() {
        let a = Tensor::from_rows(&[[0.0, -FRAC_PI_2], [FRAC_PI_2, 0.0]]);
        let e = expm(&a).unwrap();
        let want = Tensor::from_rows(&[[0.0, -1.0], [1.0, 0.0]]);
        assert!(e.sub(&want).max_abs() < 1e-10);
    }

    #[test]
    fn guards() {
        assert!(matches!(
            expm(&Tensor::zeros([2, 3])),
            Err(LinalgError::NotSquare(_))
        ));
        let big = Tensor::from_rows(&[[800.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(expm(&big), Err(LinalgError::ExpmOverflow { .. })));
        let nan = Tensor::from_rows(&[[f64::NAN, 0.0], [0.0, 1.0]]);
        assert!(expm(&nan).is_err());
    }

    #[test]
    fn evolve_trivial_cases() {
        let l = Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.1]]);
        let z = Tensor::from_rows(&[[1.0, 2.0], [-0.5, 0.25]]);
        assert_eq!(evolve(&l, &z, 0.0).unwrap(), z);
        assert_eq!(evolve(&Tensor::zeros([2, 2]), &z, 0.8).unwrap(), z);
        assert!(evolve(&l, &z, 1.5).is_err());
    }

    #[test]
    fn tape_version_matches_plain() {
        let a = Tensor::from_rows(&[[0.3, -1.2, 0.5], [2.0, 0.1, -0.7], [0.0, 0.4, -2.5]]);
        let tape = Tape::new();
        let v = tape.var(a.clone());
        let e = expm_on_tape(&tape, v).unwrap();
        assert_eq!(*e.value(), expm(&a).unwrap());
    }
}
