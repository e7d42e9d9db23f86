//! Multilayer perceptrons and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndcore::{DualTensor, DualVar, Tensor, Var};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("invalid MLP spec: {0}")]
    InvalidSpec(String),
    #[error("parameter list does not match spec: {0}")]
    ParamMismatch(String),
    #[error("non-finite gradient in parameter {param} at element {index} (value {value})")]
    NonFiniteGradient {
        param: usize,
        index: usize,
        value: f64,
    },
    #[error("invalid optimizer settings: {0}")]
    InvalidOptimizer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
}

/// Fully connected network: `depth` hidden layers of width `hidden_dim`
/// followed by a linear output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub const fn new(input_dim: usize, hidden_dim: usize, depth: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            depth,
            output_dim,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.depth == 0 {
            return Err(NnError::InvalidSpec("depth must be at least 1".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(NnError::InvalidSpec(format!(
                "all dims must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each linear layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.depth {
            dims.push((fan_in, self.hidden_dim));
            fan_in = self.hidden_dim;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    /// Parameter shapes in declaration order `[W0, b0, W1, b1, ...]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [vec![i, o], vec![1, o]])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn check_params(&self, params: &[Tensor]) -> Result<(), NnError> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(NnError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (k, (s, p)) in shapes.iter().zip(params).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(NnError::ParamMismatch(format!(
                    "tensor {k}: expected {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Kaiming-uniform weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<Vec<Tensor>, NnError> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let mut params = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
        params.push(w);
        params.push(Tensor::zeros([1, fan_out]));
    }
    Ok(params)
}

/// Anything an MLP layer can be evaluated on.
pub trait MlpValue: Sized {
    type Param;
    fn affine(&self, w: &Self::Param, b: &Self::Param) -> Self;
    fn silu(&self) -> Self;
}

impl MlpValue for Tensor {
    type Param = Tensor;
    fn affine(&self, w: &Tensor, b: &Tensor) -> Self {
        self.matmul(w).add_row(b)
    }
    fn silu(&self) -> Self {
        self.map(crate::ndcore::silu)
    }
}

impl MlpValue for DualTensor {
    type Param = Tensor;
    fn affine(&self, w: &Tensor, b: &Tensor) -> Self {
        self.matmul(w).add_row(b)
    }
    fn silu(&self) -> Self {
        DualTensor::silu(self)
    }
}

impl<'t> MlpValue for Var<'t> {
    type Param = Var<'t>;
    fn affine(&self, w: &Var<'t>, b: &Var<'t>) -> Self {
        self.matmul(*w).add_row(*b)
    }
    fn silu(&self) -> Self {
        Var::silu(*self)
    }
}

impl<'t> MlpValue for DualVar<'t> {
    type Param = Var<'t>;
    fn affine(&self, w: &Var<'t>, b: &Var<'t>) -> Self {
        DualVar::affine(*self, *w, *b)
    }
    fn silu(&self) -> Self {
        DualVar::silu(*self)
    }
}

/// Forward pass on `[batch, input_dim]`. Parameter shapes are checked by
/// debug assertion only; use [`MlpSpec::check_params`] at API boundaries.
pub fn mlp_forward<V: MlpValue>(spec: &MlpSpec, params: &[V::Param], input: &V) -> V {
    debug_assert_eq!(params.len(), 2 * (spec.depth + 1));
    let Activation::Silu = spec.activation;
    let mut h = input.affine(&params[0], &params[1]).silu();
    for layer in 1..spec.depth {
        h = h.affine(&params[2 * layer], &params[2 * layer + 1]).silu();
    }
    let last = 2 * spec.depth;
    h.affine(&params[last], &params[last + 1])
}

/// An MLP together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<Tensor>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self, NnError> {
        let params = init_params(&spec, seed)?;
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self, NnError> {
        spec.validate()?;
        spec.check_params(&params)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        assert_eq!(
            input.cols(),
            self.spec.input_dim,
            "mlp input has {} columns, spec wants {}",
            input.cols(),
            self.spec.input_dim
        );
        mlp_forward(&self.spec, &self.params, input)
    }

    pub fn forward_dual(&self, input: &DualTensor) -> DualTensor {
        mlp_forward(&self.spec, &self.params, input)
    }
}

/// Adam moments and hyperparameters for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Standard betas `(0.9, 0.999)` and `eps = 1e-8`.
    pub fn new(lr: f64, params: &[Tensor]) -> Result<Self, NnError> {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_hyper(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        params: &[Tensor],
    ) -> Result<Self, NnError> {
        if !(lr > 0.0) {
            return Err(NnError::InvalidOptimizer(format!("lr must be > 0, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(NnError::InvalidOptimizer(format!("{name} = {b} not in [0, 1)")));
            }
        }
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One bias-corrected Adam update applied in place. Nothing is modified
    /// when a gradient is non-finite.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NnError::ParamMismatch(format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return Err(NnError::ParamMismatch(format!(
                    "param {k} shape {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(index) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    param: k,
                    index,
                    value: g.data()[index],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::update`].
pub fn adam_step(
    state: &AdamState,
    params: &[Tensor],
    grads: &[Tensor],
) -> Result<(Vec<Tensor>, AdamState), NnError> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    state.update(&mut params, grads)?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::grad;

    #[test]
    fn identity_network_is_silu() {
        let spec = MlpSpec::new(3, 3, 1, 3);
        let params = vec![
            Tensor::eye(3),
            Tensor::zeros([1, 3]),
            Tensor::eye(3),
            Tensor::zeros([1, 3]),
        ];
        let net = Mlp::from_params(spec, params).unwrap();
        let x = Tensor::from_rows(&[[0.5, -0.3, 2.0]]);
        assert_eq!(net.forward(&x), x.map(crate::ndcore::silu));
    }

    #[test]
    fn zero_weights_give_bias() {
        let spec = MlpSpec::new(2, 4, 2, 3);
        let mut params: Vec<Tensor> = spec.param_shapes().into_iter().map(Tensor::zeros).collect();
        let b = Tensor::from_rows(&[[1.0, -2.0, 0.5]]);
        params[5] = b.clone();
        let net = Mlp::from_params(spec, params).unwrap();
        let out = net.forward(&Tensor::from_rows(&[[3.0, 4.0], [-1.0, 0.2]]));
        assert_eq!(out.row(0), b.data());
        assert_eq!(out.row(1), b.data());
    }

    #[test]
    fn forward_matches_scripted_pass() {
        // independent scalar re-implementation of the layer recurrence
        let spec = MlpSpec::new(3, 7, 3, 2);
        let net = Mlp::new(spec, 5).unwrap();
        let x = [0.5, -0.3, 0.1];
        let mut h: Vec<f64> = x.to_vec();
        for (layer, (fi, fo)) in spec.layer_dims().into_iter().enumerate() {
            let w = &net.params[2 * layer];
            let b = &net.params[2 * layer + 1];
            let mut out = vec![0.0; fo];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = b.data()[j];
                for (i, hi) in h.iter().enumerate().take(fi) {
                    acc += hi * w.data()[i * fo + j];
                }
                *o = if layer < spec.depth {
                    acc / (1.0 + (-acc).exp())
                } else {
                    acc
                };
            }
            h = out;
        }
        let got = net.forward(&Tensor::from_rows(&[x]));
        for (g, e) in got.data().iter().zip(&h) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let spec = MlpSpec::new(3, 64, 3, 2);
        let a = init_params(&spec, 1).unwrap();
        assert_eq!(a, init_params(&spec, 1).unwrap());
        assert_ne!(a, init_params(&spec, 2).unwrap());
        for (layer, (fan_in, _)) in spec.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(a[2 * layer].max_abs() <= bound);
            assert!(a[2 * layer].max_abs() > 0.5 * bound);
            assert_eq!(a[2 * layer + 1].max_abs(), 0.0);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MlpSpec::new(2, 4, 0, 2).validate().is_err());
        assert!(MlpSpec::new(0, 4, 1, 2).validate().is_err());
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let p = vec![Tensor::from_rows(&[[1.0, -2.0]])];
        let st = AdamState::new(0.1, &p).unwrap();
        let (q, st2) = adam_step(&st, &p, &[Tensor::zeros([1, 2])]).unwrap();
        assert_eq!(p, q);
        assert_eq!(st2.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let p = vec![Tensor::from_rows(&[[0.0, 1.0, 2.0]])];
        let g = vec![Tensor::from_rows(&[[0.5, -3.0, 1e-3]])];
        let st = AdamState::new(0.01, &p).unwrap();
        let (q, _) = adam_step(&st, &p, &g).unwrap();
        for i in 0..3 {
            let gi = g[0].data()[i];
            let expected = p[0].data()[i] - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((q[0].data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(0.1, &p).unwrap();
        for _ in 0..500 {
            let g = grad(
                |tape, ps| ps[0].sub(tape.constant(Tensor::scalar(3.0))).square().sum(),
                &p,
            )
            .unwrap();
            st.update(&mut p, &g).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 1e-3, "p = {}", p[0].item());
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(0.1, &p).unwrap();
        let err = st.update(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { param: 0, .. }));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(st.step, 0);
    }
}
