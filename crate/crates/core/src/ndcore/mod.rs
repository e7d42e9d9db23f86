//! Dense arrays plus the two differentiation modes used by training:
//! reverse-mode gradients of scalar losses ([`grad`], [`Tape`]) and
//! forward-mode Jacobian-vector products ([`jvp`], [`DualTensor`], [`DualVar`]).

mod dual;
mod tape;
mod tensor;

pub use dual::{jvp, jvp_central_difference, DualTensor, DualVar};
pub use tape::{grad, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cannot differentiate through unsupported op `{0}`")]
    UnsupportedOp(&'static str),
    #[error("non-finite value {value} in {what} at flat index {index}")]
    NonFinite {
        what: String,
        index: usize,
        value: f64,
    },
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · σ(x)`
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn silu_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}
