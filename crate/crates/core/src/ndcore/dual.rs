use super::{silu, silu_prime, NdError, Tensor, Var};

/// Value paired with a directional derivative of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self, NdError> {
        if primal.shape() != tangent.shape() {
            return Err(NdError::ShapeMismatch {
                op: "dual".into(),
                left: primal.shape().to_vec(),
                right: tangent.shape().to_vec(),
            });
        }
        Ok(Self { primal, tangent })
    }

    /// A value with zero tangent.
    pub fn constant(primal: Tensor) -> Self {
        let tangent = Tensor::zeros(primal.shape().to_vec());
        Self { primal, tangent }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            primal: self.primal.add(&other.primal),
            tangent: self.tangent.add(&other.tangent),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            primal: self.primal.sub(&other.primal),
            tangent: self.tangent.sub(&other.tangent),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self {
            primal: self.primal.mul(&other.primal),
            tangent: self
                .tangent
                .mul(&other.primal)
                .add(&self.primal.mul(&other.tangent)),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            primal: self.primal.scale(s),
            tangent: self.tangent.scale(s),
        }
    }

    /// Right-multiplication by a constant matrix.
    pub fn matmul(&self, w: &Tensor) -> Self {
        Self {
            primal: self.primal.matmul(w),
            tangent: self.tangent.matmul(w),
        }
    }

    /// `self · wᵀ` for a constant `w`.
    pub fn matmul_bt(&self, w: &Tensor) -> Self {
        Self {
            primal: self.primal.matmul_bt(w),
            tangent: self.tangent.matmul_bt(w),
        }
    }

    pub fn add_row(&self, bias: &Tensor) -> Self {
        Self {
            primal: self.primal.add_row(bias),
            tangent: self.tangent.clone(),
        }
    }

    pub fn silu(&self) -> Self {
        Self {
            primal: self.primal.map(silu),
            tangent: self
                .primal
                .zip_map(&self.tangent, "silu", |x, dx| silu_prime(x) * dx),
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        Self {
            primal: self.primal.slice_cols(start, end),
            tangent: self.tangent.slice_cols(start, end),
        }
    }

    pub fn concat_cols(parts: &[&DualTensor]) -> Self {
        let p: Vec<&Tensor> = parts.iter().map(|d| &d.primal).collect();
        let t: Vec<&Tensor> = parts.iter().map(|d| &d.tangent).collect();
        Self {
            primal: Tensor::concat_cols(&p),
            tangent: Tensor::concat_cols(&t),
        }
    }
}

/// `J_f(x) · v` by forward propagation of a dual number through `f`.
pub fn jvp<F>(f: F, x: &Tensor, v: &Tensor) -> Result<Tensor, NdError>
where
    F: Fn(&DualTensor) -> DualTensor,
{
    let input = DualTensor::new(x.clone(), v.clone())?;
    Ok(f(&input).tangent)
}

/// `(f(x + h·v) − f(x − h·v)) / 2h`. Reference for tests only.
pub fn jvp_central_difference<F>(f: F, x: &Tensor, v: &Tensor, h: f64) -> Result<Tensor, NdError>
where
    F: Fn(&Tensor) -> Tensor,
{
    if x.shape() != v.shape() {
        return Err(NdError::ShapeMismatch {
            op: "jvp".into(),
            left: x.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let mut plus = x.clone();
    plus.axpy(h, v);
    let mut minus = x.clone();
    minus.axpy(-h, v);
    Ok(f(&plus).sub(&f(&minus)).scale(0.5 / h))
}

/// Dual number whose halves both live on a [`super::Tape`], so the
/// directional derivative can itself be differentiated in reverse mode.
#[derive(Debug, Clone, Copy)]
pub struct DualVar<'t> {
    pub primal: Var<'t>,
    pub tangent: Var<'t>,
}

impl<'t> DualVar<'t> {
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Self {
        Self {
            primal: self.primal.matmul(w).add_row(b),
            tangent: self.tangent.matmul(w),
        }
    }

    pub fn silu(self) -> Self {
        Self {
            primal: self.primal.silu(),
            tangent: self.primal.silu_prime().mul(self.tangent),
        }
    }

    pub fn matmul_bt(self, w: Var<'t>) -> Self {
        Self {
            primal: self.primal.matmul_bt(w),
            tangent: self.tangent.matmul_bt(w),
        }
    }

    pub fn concat_cols(parts: &[DualVar<'t>]) -> Self {
        let p: Vec<Var<'t>> = parts.iter().map(|d| d.primal).collect();
        let t: Vec<Var<'t>> = parts.iter().map(|d| d.tangent).collect();
        Self {
            primal: Var::concat_cols(&p),
            tangent: Var::concat_cols(&t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_jvp() {
        let x = Tensor::from_rows(&[[0.3, -2.0]]);
        let v = Tensor::from_rows(&[[1.0, 2.0]]);
        assert_eq!(jvp(|d| d.clone(), &x, &v).unwrap(), v);
    }

    #[test]
    fn quadratic_map_jvp() {
        // f(x) = (x1², x1·x2), J = [[2x1, 0], [x2, x1]]
        let f = |d: &DualTensor| {
            let x1 = d.slice_cols(0, 1);
            let x2 = d.slice_cols(1, 2);
            DualTensor::concat_cols(&[&x1.mul(&x1), &x1.mul(&x2)])
        };
        let x = Tensor::from_rows(&[[3.0, 4.0]]);
        let v = Tensor::from_rows(&[[1.0, 0.0]]);
        assert_eq!(jvp(f, &x, &v).unwrap().data(), &[6.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let x = Tensor::zeros([1, 2]);
        let v = Tensor::zeros([1, 3]);
        assert!(matches!(
            jvp(|d| d.clone(), &x, &v),
            Err(NdError::ShapeMismatch { .. })
        ));
    }
}
