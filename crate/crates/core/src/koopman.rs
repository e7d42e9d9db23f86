//! Decoder-free Koopman embedding of the time-augmented flow.
//!
//! The observable vector is `z = [x₁, x₂, t, 1, g₁..g_p]`: the state and
//! time pass through unchanged, the constant lets a linear generator express
//! `dt/dt = 1`, and `g` is a learned MLP of `(x, t)`. Training fits a dense
//! generator `L` so that `dz/dt ≈ L z` along the frozen velocity field.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfm::{generate_trajectories, CfmError, TrajectorySet, VectorField, TRAJECTORY_STEPS};
use crate::datasets::Distribution2D;
use crate::linalg::{expm, expm_on_tape, LinalgError};
use crate::ndcore::{DualTensor, DualVar, NdError, Tape, Tensor, Var};
use crate::nn::{mlp_forward, AdamState, Mlp, MlpSpec, NnError};
use crate::{seeded_rng, seeded_stream};

/// Coordinates ahead of the learned block: `x₁, x₂, t, 1`.
pub const PRESERVED: usize = 4;

#[derive(Debug, Error)]
pub enum KoopmanError {
    #[error("generator must be {expected}x{expected}, got {got:?}")]
    GeneratorShape { expected: usize, got: Vec<usize> },
    #[error("consistency batch mixes times {first} and {other}; the exponential is shared")]
    MixedTimes { first: f64, other: f64 },
    #[error("batch shapes disagree: {0}")]
    BatchShape(String),
    #[error(
        "non-finite loss at step {step} \
         (generator {generator:e}, consistency {consistency:e}, prediction {prediction:e})"
    )]
    NonFinite {
        step: usize,
        generator: f64,
        consistency: f64,
        prediction: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Cfm(#[from] CfmError),
}

/// Encoder architecture; `p_learned = 0` means no encoder at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub p_learned: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            p_learned: 28,
            hidden: 64,
            depth: 3,
        }
    }
}

impl EncoderConfig {
    pub fn spec(&self) -> Option<MlpSpec> {
        (self.p_learned > 0).then(|| MlpSpec::new(3, self.hidden, self.depth, self.p_learned))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    encoder: Option<Mlp>,
    l: Tensor,
}

impl KoopmanModel {
    /// Fresh model: default-initialized encoder and `L ~ N(0, init_std²)`.
    pub fn new(encoder: EncoderConfig, seed: u64, init_std: f64) -> Result<Self, KoopmanError> {
        let enc = match encoder.spec() {
            Some(spec) => Some(Mlp::new(spec, seed)?),
            None => None,
        };
        let p = PRESERVED + encoder.p_learned;
        let normal = Normal::new(0.0, init_std)
            .map_err(|e| KoopmanError::Config(format!("operator init std: {e}")))?;
        let mut rng = seeded_stream(seed, 2);
        let l = Tensor::from_fn(p, p, |_, _| normal.sample(&mut rng));
        Ok(Self { encoder: enc, l })
    }

    pub fn from_parts(
        spec: Option<MlpSpec>,
        encoder_params: Vec<Tensor>,
        l: Tensor,
    ) -> Result<Self, KoopmanError> {
        let encoder = match spec {
            Some(spec) => {
                if spec.input_dim != 3 {
                    return Err(KoopmanError::Config(format!(
                        "encoder input must be (x, t) = 3, got {}",
                        spec.input_dim
                    )));
                }
                Some(Mlp::from_params(spec, encoder_params)?)
            }
            None if encoder_params.is_empty() => None,
            None => {
                return Err(KoopmanError::Config(
                    "encoder parameters given without a spec".into(),
                ))
            }
        };
        let p = PRESERVED + encoder.as_ref().map_or(0, |e| e.spec.output_dim);
        if l.shape() != [p, p] {
            return Err(KoopmanError::GeneratorShape {
                expected: p,
                got: l.shape().to_vec(),
            });
        }
        Ok(Self { encoder, l })
    }

    pub fn p_learned(&self) -> usize {
        self.encoder.as_ref().map_or(0, |e| e.spec.output_dim)
    }

    pub fn p_total(&self) -> usize {
        PRESERVED + self.p_learned()
    }

    pub fn encoder_spec(&self) -> Option<&MlpSpec> {
        self.encoder.as_ref().map(|e| &e.spec)
    }

    pub fn encoder_params(&self) -> &[Tensor] {
        self.encoder.as_ref().map_or(&[], |e| &e.params)
    }

    /// The generator matrix `L`.
    pub fn generator(&self) -> &Tensor {
        &self.l
    }

    pub fn set_generator(&mut self, l: Tensor) -> Result<(), KoopmanError> {
        let p = self.p_total();
        if l.shape() != [p, p] {
            return Err(KoopmanError::GeneratorShape {
                expected: p,
                got: l.shape().to_vec(),
            });
        }
        self.l = l;
        Ok(())
    }

    /// Encoder parameters followed by `L`.
    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.encoder_params().to_vec();
        p.push(self.l.clone());
        p
    }

    fn set_params(&mut self, mut params: Vec<Tensor>) {
        self.l = params.pop().expect("generator present");
        if let Some(e) = self.encoder.as_mut() {
            e.params = params;
        }
    }

    pub fn layout(&self) -> Vec<String> {
        let mut names: Vec<String> = ["x1", "x2", "t", "1"].map(String::from).to_vec();
        names.extend((1..=self.p_learned()).map(|i| format!("g{i}")));
        names
    }

    /// `z = [x, t, 1, g(x, t)]`, one row per sample.
    pub fn encode(&self, x: &Tensor, t: &[f64]) -> Tensor {
        check_xt(x, t);
        let tc = Tensor::column(t);
        let ones = Tensor::full([x.rows(), 1], 1.0);
        match &self.encoder {
            Some(enc) => {
                let g = enc.forward(&Tensor::concat_cols(&[x, &tc]));
                Tensor::concat_cols(&[x, &tc, &ones, &g])
            }
            None => Tensor::concat_cols(&[x, &tc, &ones]),
        }
    }

    /// `z` together with its derivative along the input direction
    /// `(v₁, v₂, 1)`.
    pub fn encode_dual(&self, x: &Tensor, t: &[f64], v: &Tensor) -> DualTensor {
        check_xt(x, t);
        assert_eq!(v.shape(), x.shape(), "velocity shape must match state shape");
        let b = x.rows();
        let tc = Tensor::column(t);
        let ones = Tensor::full([b, 1], 1.0);
        let zero = Tensor::zeros([b, 1]);
        let mut primal = vec![x.clone(), tc.clone(), ones.clone()];
        let mut tangent = vec![v.clone(), ones.clone(), zero];
        if let Some(enc) = &self.encoder {
            let input = DualTensor {
                primal: Tensor::concat_cols(&[x, &tc]),
                tangent: Tensor::concat_cols(&[v, &ones]),
            };
            let g = enc.forward_dual(&input);
            primal.push(g.primal);
            tangent.push(g.tangent);
        }
        let pr: Vec<&Tensor> = primal.iter().collect();
        let tg: Vec<&Tensor> = tangent.iter().collect();
        DualTensor {
            primal: Tensor::concat_cols(&pr),
            tangent: Tensor::concat_cols(&tg),
        }
    }

    /// Koopman-implied velocity `(L z)[0:2]`.
    pub fn vector_field(&self, x: &Tensor, t: &[f64]) -> Tensor {
        self.encode(x, t).matmul_bt(&self.l).slice_cols(0, 2)
    }
}

fn check_xt(x: &Tensor, t: &[f64]) {
    assert_eq!(x.cols(), 2, "states must have 2 columns");
    assert_eq!(x.rows(), t.len(), "one time per state row");
}

/// Parameters of a [`KoopmanModel`] recorded on a tape.
#[derive(Clone, Copy)]
pub struct TapeModel<'a, 't> {
    pub spec: Option<&'a MlpSpec>,
    pub encoder: &'a [Var<'t>],
    pub l: Var<'t>,
}

impl<'a, 't> TapeModel<'a, 't> {
    pub fn encode(&self, tape: &'t Tape, x: &Tensor, t: &[f64]) -> Var<'t> {
        check_xt(x, t);
        let tc = Tensor::column(t);
        let xt = tape.constant(Tensor::concat_cols(&[x, &tc, &Tensor::full([x.rows(), 1], 1.0)]));
        match self.spec {
            Some(spec) => {
                let input = tape.constant(Tensor::concat_cols(&[x, &tc]));
                let g = mlp_forward(spec, self.encoder, &input);
                Var::concat_cols(&[xt, g])
            }
            None => xt,
        }
    }

    pub fn encode_dual(&self, tape: &'t Tape, x: &Tensor, t: &[f64], v: &Tensor) -> DualVar<'t> {
        check_xt(x, t);
        let b = x.rows();
        let tc = Tensor::column(t);
        let ones = Tensor::full([b, 1], 1.0);
        let fixed = DualVar {
            primal: tape.constant(Tensor::concat_cols(&[x, &tc, &ones])),
            tangent: tape.constant(Tensor::concat_cols(&[v, &ones, &Tensor::zeros([b, 1])])),
        };
        match self.spec {
            Some(spec) => {
                let input = DualVar {
                    primal: tape.constant(Tensor::concat_cols(&[x, &tc])),
                    tangent: tape.constant(Tensor::concat_cols(&[v, &ones])),
                };
                let g = mlp_forward(spec, self.encoder, &input);
                DualVar::concat_cols(&[fixed, g])
            }
            None => fixed,
        }
    }
}

/// Puts every model parameter on `tape` as a differentiable leaf.
pub fn model_on_tape<'a, 't>(
    tape: &'t Tape,
    model: &'a KoopmanModel,
    encoder: &'a mut Vec<Var<'t>>,
) -> TapeModel<'a, 't> {
    encoder.clear();
    encoder.extend(model.encoder_params().iter().map(|p| tape.var(p.clone())));
    TapeModel {
        spec: model.encoder_spec(),
        encoder,
        l: tape.var(model.l.clone()),
    }
}

fn check_batch(x: &Tensor, t: &[f64], v: &Tensor) -> Result<(), KoopmanError> {
    if x.cols() != 2 || v.shape() != x.shape() || t.len() != x.rows() || x.rows() == 0 {
        return Err(KoopmanError::BatchShape(format!(
            "x {:?}, t [{}], v {:?}",
            x.shape(),
            t.len(),
            v.shape()
        )));
    }
    Ok(())
}

fn shared_time(t: &[f64]) -> Result<f64, KoopmanError> {
    let first = *t
        .first()
        .ok_or_else(|| KoopmanError::BatchShape("empty batch".into()))?;
    if let Some(&other) = t.iter().find(|&&s| s != first) {
        return Err(KoopmanError::MixedTimes { first, other });
    }
    Ok(first)
}

/// Generator residual: `mean_i ‖L z_i − ż_i‖²`, with `ż` the derivative of
/// the encoding along `(v, 1)`.
pub fn generator_loss(
    model: &KoopmanModel,
    x: &Tensor,
    t: &[f64],
    v: &Tensor,
) -> Result<f64, KoopmanError> {
    check_batch(x, t, v)?;
    let d = model.encode_dual(x, t, v);
    let r = d.primal.matmul_bt(&model.l).sub(&d.tangent);
    Ok(r.sq_norm() / x.rows() as f64)
}

pub fn generator_loss_on_tape<'t>(
    tape: &'t Tape,
    m: &TapeModel<'_, 't>,
    x: &Tensor,
    t: &[f64],
    v: &Tensor,
) -> Var<'t> {
    let d = m.encode_dual(tape, x, t, v);
    d.primal.matmul_bt(m.l).sub(d.tangent).mean_row_sq_norm()
}

/// `mean_i ‖e^{L(1−tᵢ)} z(xᵢ, tᵢ) − z(x₁ᵢ, 1)‖²`; every row must share
/// the same `tᵢ`.
pub fn target_consistency_loss(
    model: &KoopmanModel,
    x_t: &Tensor,
    t: &[f64],
    x_1: &Tensor,
) -> Result<f64, KoopmanError> {
    check_batch(x_t, t, x_1)?;
    let ti = shared_time(t)?;
    let e = expm(&model.l.scale(1.0 - ti))?;
    let z0 = model.encode(x_t, t);
    let z1 = model.encode(x_1, &vec![1.0; x_1.rows()]);
    Ok(z0.matmul_bt(&e).sub(&z1).sq_norm() / x_t.rows() as f64)
}

pub fn target_consistency_loss_on_tape<'t>(
    tape: &'t Tape,
    m: &TapeModel<'_, 't>,
    x_t: &Tensor,
    t_i: f64,
    x_1: &Tensor,
) -> Result<Var<'t>, KoopmanError> {
    let b = x_t.rows();
    let e = expm_on_tape(tape, m.l.scale(1.0 - t_i))?;
    let z0 = m.encode(tape, x_t, &vec![t_i; b]);
    let z1 = m.encode(tape, x_1, &vec![1.0; b]);
    Ok(z0.matmul_bt(e).sub(z1).mean_row_sq_norm())
}

/// `mean_i ‖(L zᵢ)[0:2] − vᵢ‖²`.
pub fn prediction_loss(
    model: &KoopmanModel,
    x: &Tensor,
    t: &[f64],
    v: &Tensor,
) -> Result<f64, KoopmanError> {
    check_batch(x, t, v)?;
    Ok(model.vector_field(x, t).sub(v).sq_norm() / x.rows() as f64)
}

pub fn prediction_loss_on_tape<'t>(
    tape: &'t Tape,
    m: &TapeModel<'_, 't>,
    x: &Tensor,
    t: &[f64],
    v: &Tensor,
) -> Var<'t> {
    let z = m.encode(tape, x, t);
    let vc = tape.constant(v.clone());
    z.matmul_bt(m.l).slice_cols(0, 2).sub(vc).mean_row_sq_norm()
}

/// Loss weights; a zero weight switches the term off entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub generator: f64,
    pub consistency: f64,
    pub prediction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            generator: 1.0,
            consistency: 1.0,
            prediction: 0.0,
        }
    }
}

impl LossConfig {
    pub fn generator_only() -> Self {
        Self {
            consistency: 0.0,
            ..Self::default()
        }
    }

    /// Parses a comma-separated toggle list such as
    /// `generator,consistency` or `generator,prediction=0.5`.
    pub fn parse_toggles(s: &str) -> Result<Self, KoopmanError> {
        let mut out = Self {
            generator: 0.0,
            consistency: 0.0,
            prediction: 0.0,
        };
        for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, weight) = match item.split_once('=') {
                Some((n, w)) => (
                    n.trim(),
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| KoopmanError::Config(format!("bad loss weight `{w}`")))?,
                ),
                None => (item, 1.0),
            };
            if !(weight.is_finite() && weight >= 0.0) {
                return Err(KoopmanError::Config(format!("bad loss weight {weight}")));
            }
            match name {
                "generator" | "gen" => out.generator = weight,
                "consistency" | "cons" => out.consistency = weight,
                "prediction" | "pred" => out.prediction = weight,
                other => return Err(KoopmanError::Config(format!("unknown loss `{other}`"))),
            }
        }
        if out.generator + out.consistency + out.prediction == 0.0 {
            return Err(KoopmanError::Config("no loss term enabled".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = [
            ("generator", self.generator),
            ("consistency", self.consistency),
            ("prediction", self.prediction),
        ]
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(n, w)| format!("{n}={w}"))
        .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    ReverseLinear,
    ForwardLinear,
    Random,
}

impl FromStr for ScheduleMode {
    type Err = KoopmanError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reverse" | "reverse-linear" | "reverse_linear" => Ok(Self::ReverseLinear),
            "forward" | "forward-linear" | "forward_linear" => Ok(Self::ForwardLinear),
            "random" => Ok(Self::Random),
            other => Err(KoopmanError::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ReverseLinear => "reverse",
            Self::ForwardLinear => "forward",
            Self::Random => "random",
        })
    }
}

/// Start time `tᵢ` of the consistency term over training. Linear modes move
/// between `t_start` and `t_end` during the first `ramp_fraction` of steps
/// and then hold; every emitted value lies on the trajectory grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub epochs: usize,
    pub mode: ScheduleMode,
    pub ramp_fraction: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            t_start: 1.0,
            t_end: 0.0,
            epochs: 40,
            mode: ScheduleMode::ReverseLinear,
            ramp_fraction: 0.5,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<(), KoopmanError> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.t_start) || !unit.contains(&self.t_end) {
            return Err(KoopmanError::Config("schedule times must lie in [0, 1]".into()));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(KoopmanError::Config("ramp_fraction must lie in (0, 1]".into()));
        }
        if self.epochs == 0 {
            return Err(KoopmanError::Config("epochs must be positive".into()));
        }
        Ok(())
    }

    /// `tᵢ` for `step` of `total` steps.
    pub fn t_at<R: Rng>(&self, step: usize, total: usize, rng: &mut R) -> f64 {
        let ramp = ((self.ramp_fraction * total as f64).ceil() as usize).max(2);
        let frac = (step as f64 / (ramp - 1) as f64).min(1.0);
        let (hi, lo) = (self.t_start.max(self.t_end), self.t_start.min(self.t_end));
        let t = match self.mode {
            ScheduleMode::ReverseLinear => hi + (lo - hi) * frac,
            ScheduleMode::ForwardLinear => lo + (hi - lo) * frac,
            ScheduleMode::Random => rng.random_range(lo..=hi),
        };
        snap_to_grid(t)
    }
}

fn snap_to_grid(t: f64) -> f64 {
    let n = TRAJECTORY_STEPS as f64;
    ((t * n).round() / n).clamp(0.0, 1.0)
}

/// Learning-rate decay on a stalled validation generator loss. After every
/// epoch past `warmup_epochs`, both groups are multiplied by `factor` once the
/// loss has failed to beat its best by a relative `threshold` for `patience`
/// epochs in a row. The multiplier never drops below `min_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub warmup_epochs: usize,
    pub min_scale: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 2,
            threshold: 1e-3,
            warmup_epochs: 1,
            min_scale: 1e-3,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<(), KoopmanError> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(KoopmanError::Config("plateau factor must lie in (0, 1)".into()));
        }
        if !(self.threshold >= 0.0 && self.min_scale > 0.0 && self.min_scale <= 1.0) {
            return Err(KoopmanError::Config("plateau threshold/min_scale out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct PlateauState {
    best: f64,
    bad_epochs: usize,
    scale: f64,
}

impl PlateauState {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            bad_epochs: 0,
            scale: 1.0,
        }
    }

    /// Records one epoch's loss; true when the scale changed.
    fn observe(&mut self, cfg: &PlateauConfig, epoch: usize, loss: f64) -> bool {
        if loss < self.best * (1.0 - cfg.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.best = self.best.min(loss);
        if epoch <= cfg.warmup_epochs {
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < cfg.patience || self.scale <= cfg.min_scale {
            return false;
        }
        self.bad_epochs = 0;
        self.scale = (self.scale * cfg.factor).max(cfg.min_scale);
        true
    }
}

/// `(x, t, v)` triples with `v` the frozen field at `(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub x: Tensor,
    pub t: Vec<f64>,
    pub v: Tensor,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PairSet {
        PairSet {
            x: self.x.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            v: self.v.select_rows(idx),
        }
    }

    fn split(self, val_fraction: f64) -> (PairSet, PairSet) {
        let n = self.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
        let train: Vec<usize> = (0..n - n_val).collect();
        let val: Vec<usize> = (n - n_val..n).collect();
        (self.select(&train), self.select(&val))
    }
}

/// States uniform on `[−w, w]²`, times uniform on the trajectory grid.
pub fn uniform_pairs<F: VectorField + ?Sized>(
    field: &F,
    n: usize,
    half_width: f64,
    seed: u64,
) -> PairSet {
    let mut rng = seeded_rng(seed);
    let x = Tensor::from_fn(n, 2, |_, _| rng.random_range(-half_width..=half_width));
    let t: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0..=TRAJECTORY_STEPS) as f64 / TRAJECTORY_STEPS as f64)
        .collect();
    let v = field.velocity(&x, &t);
    PairSet { x, t, v }
}

/// Every recorded `(state, time, velocity)` of a trajectory set, shuffled.
pub fn trajectory_pairs(traj: &TrajectorySet, seed: u64) -> PairSet {
    let n = traj.n_traj();
    let w = traj.n_steps() + 1;
    let mut xs = Vec::with_capacity(n * w * 2);
    let mut vs = Vec::with_capacity(n * w * 2);
    let mut ts = Vec::with_capacity(n * w);
    for k in 0..w {
        xs.extend_from_slice(traj.states_at(k).data());
        vs.extend_from_slice(traj.velocities_at(k).data());
        ts.extend(std::iter::repeat_n(traj.time(k), n));
    }
    let all = PairSet {
        x: Tensor::new([n * w, 2], xs).expect("sizes agree"),
        t: ts,
        v: Tensor::new([n * w, 2], vs).expect("sizes agree"),
    };
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut seeded_rng(seed));
    all.select(&idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Field samples on a uniform box around the data.
    UniformDomain { n_pairs: usize, half_width: f64 },
    /// Field samples along the trajectory corpus.
    Trajectories,
}

impl Default for DataSource {
    fn default() -> Self {
        Self::UniformDomain {
            n_pairs: 20_000,
            half_width: 8.0,
        }
    }
}

/// Everything the trainer consumes: generator pairs split for validation
/// and the trajectory corpus behind the consistency term.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanData {
    pub train: PairSet,
    pub val: PairSet,
    pub trajectories: TrajectorySet,
}

impl KoopmanData {
    pub fn build<F: VectorField + ?Sized>(
        field: &F,
        prior: &Distribution2D,
        cfg: &KoopmanTrainConfig,
    ) -> Result<Self, KoopmanError> {
        let trajectories = generate_trajectories(field, prior, cfg.n_traj, cfg.seed)?;
        Self::with_trajectories(field, trajectories, cfg)
    }

    pub fn with_trajectories<F: VectorField + ?Sized>(
        field: &F,
        trajectories: TrajectorySet,
        cfg: &KoopmanTrainConfig,
    ) -> Result<Self, KoopmanError> {
        let pairs = match cfg.source {
            DataSource::UniformDomain {
                n_pairs,
                half_width,
            } => uniform_pairs(field, n_pairs, half_width, cfg.seed ^ 0x5eed),
            DataSource::Trajectories => trajectory_pairs(&trajectories, cfg.seed ^ 0x5eed),
        };
        let (train, val) = pairs.split(cfg.val_fraction);
        if train.len() < cfg.batch || val.is_empty() {
            return Err(KoopmanError::Config(format!(
                "{} training pairs cannot fill batches of {}",
                train.len(),
                cfg.batch
            )));
        }
        Ok(Self {
            train,
            val,
            trajectories,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanTrainConfig {
    pub encoder: EncoderConfig,
    pub losses: LossConfig,
    pub schedule: CurriculumSchedule,
    pub source: DataSource,
    pub batch: usize,
    pub lr_encoder: f64,
    pub lr_operator: f64,
    pub operator_init_std: f64,
    pub plateau: Option<PlateauConfig>,
    pub n_traj: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for KoopmanTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            losses: LossConfig::default(),
            schedule: CurriculumSchedule::default(),
            source: DataSource::default(),
            batch: 256,
            lr_encoder: 1e-3,
            lr_operator: 1e-4,
            operator_init_std: 1e-3,
            plateau: None,
            n_traj: 2048,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl KoopmanTrainConfig {
    pub fn validate(&self) -> Result<(), KoopmanError> {
        self.schedule.validate()?;
        if let Some(p) = &self.plateau {
            p.validate()?;
        }
        if self.batch == 0 || self.n_traj == 0 {
            return Err(KoopmanError::Config("batch and n_traj must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(KoopmanError::Config("val_fraction must lie in (0, 1)".into()));
        }
        let l = &self.losses;
        if [l.generator, l.consistency, l.prediction]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
            || l.generator + l.consistency + l.prediction == 0.0
        {
            return Err(KoopmanError::Config("loss weights must be >= 0, not all 0".into()));
        }
        Ok(())
    }
}

/// Loss components of one step, or means over an epoch. Disabled terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub generator: f64,
    pub consistency: f64,
    pub prediction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub t_i: f64,
    /// Learning-rate multiplier in force at the end of the epoch.
    pub lr_scale: f64,
    pub train: LossParts,
    pub val_generator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanReport {
    pub steps: usize,
    pub initial_val_generator: f64,
    pub final_val_generator: f64,
    pub epochs: Vec<EpochLog>,
}

/// Incremental Koopman training against a frozen field.
pub struct KoopmanTrainer {
    cfg: KoopmanTrainConfig,
    model: KoopmanModel,
    data: KoopmanData,
    adam_encoder: AdamState,
    adam_operator: AdamState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    steps_per_epoch: usize,
    epoch_sum: LossParts,
    epoch_count: usize,
    plateau: PlateauState,
    report: KoopmanReport,
}

impl KoopmanTrainer {
    pub fn new(data: KoopmanData, cfg: KoopmanTrainConfig) -> Result<Self, KoopmanError> {
        cfg.validate()?;
        let model = KoopmanModel::new(cfg.encoder, cfg.seed, cfg.operator_init_std)?;
        Self::with_model(model, data, cfg)
    }

    /// Continues training from an existing model.
    pub fn with_model(
        model: KoopmanModel,
        data: KoopmanData,
        cfg: KoopmanTrainConfig,
    ) -> Result<Self, KoopmanError> {
        cfg.validate()?;
        let steps_per_epoch = data.train.len() / cfg.batch;
        if steps_per_epoch == 0 {
            return Err(KoopmanError::Config("batch larger than training set".into()));
        }
        let adam_encoder = AdamState::new(cfg.lr_encoder, model.encoder_params())?;
        let adam_operator =
            AdamState::new(cfg.lr_operator, std::slice::from_ref(model.generator()))?;
        let initial = generator_loss(&model, &data.val.x, &data.val.t, &data.val.v)?;
        let mut rng = seeded_stream(cfg.seed, 3);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            model,
            data,
            adam_encoder,
            adam_operator,
            rng,
            order,
            cursor: 0,
            step: 0,
            steps_per_epoch,
            epoch_sum: LossParts::default(),
            epoch_count: 0,
            plateau: PlateauState::new(),
            report: KoopmanReport {
                steps: 0,
                initial_val_generator: initial,
                final_val_generator: initial,
                epochs: Vec::new(),
            },
            cfg,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.schedule.epochs * self.steps_per_epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn model(&self) -> &KoopmanModel {
        &self.model
    }

    pub fn data(&self) -> &KoopmanData {
        &self.data
    }

    pub fn report(&self) -> &KoopmanReport {
        &self.report
    }

    pub fn into_parts(self) -> (KoopmanModel, KoopmanReport) {
        (self.model, self.report)
    }

    fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.cfg.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + self.cfg.batch].to_vec();
        self.cursor += self.cfg.batch;
        idx
    }

    /// One joint update of encoder and generator.
    pub fn step(&mut self) -> Result<LossParts, KoopmanError> {
        let total_steps = self.total_steps();
        let t_i = self.cfg.schedule.t_at(self.step, total_steps, &mut self.rng);
        let w = self.cfg.losses;
        let idx = self.next_indices();
        let gen_batch = self.data.train.select(&idx);
        let traj = &self.data.trajectories;
        let cons_idx: Vec<usize> = (0..self.cfg.batch)
            .map(|_| self.rng.random_range(0..traj.n_traj()))
            .collect();
        let k = (t_i * traj.n_steps() as f64).round() as usize;
        let x_t = traj.states_at(k).select_rows(&cons_idx);
        let x_1 = traj.terminals.select_rows(&cons_idx);

        let tape = Tape::new();
        let mut enc = Vec::new();
        let m = model_on_tape(&tape, &self.model, &mut enc);
        let mut parts = LossParts::default();
        let mut terms: Vec<Var<'_>> = Vec::new();
        if w.generator > 0.0 {
            let g = generator_loss_on_tape(&tape, &m, &gen_batch.x, &gen_batch.t, &gen_batch.v);
            parts.generator = g.value().item();
            terms.push(g.scale(w.generator));
        }
        if w.consistency > 0.0 {
            let c = target_consistency_loss_on_tape(&tape, &m, &x_t, t_i, &x_1)?;
            parts.consistency = c.value().item();
            terms.push(c.scale(w.consistency));
        }
        if w.prediction > 0.0 {
            let p = prediction_loss_on_tape(&tape, &m, &gen_batch.x, &gen_batch.t, &gen_batch.v);
            parts.prediction = p.value().item();
            terms.push(p.scale(w.prediction));
        }
        let total = terms[1..].iter().fold(terms[0], |acc, &t| acc.add(t));
        parts.total = total.value().item();
        let diverged = || KoopmanError::NonFinite {
            step: self.step,
            generator: parts.generator,
            consistency: parts.consistency,
            prediction: parts.prediction,
        };
        if !parts.total.is_finite() {
            return Err(diverged());
        }
        let mut grads = tape.backward(total)?;
        let g_enc: Vec<Tensor> = m.encoder.iter().map(|&v| grads.take(v)).collect();
        let g_l = grads.take(m.l);
        drop(tape);

        let mut params = self.model.params();
        let mut l = vec![params.pop().expect("generator")];
        self.adam_encoder
            .update(&mut params, &g_enc)
            .map_err(|_| diverged())?;
        self.adam_operator
            .update(&mut l, &[g_l])
            .map_err(|_| diverged())?;
        params.extend(l);
        self.model.set_params(params);

        self.step += 1;
        self.report.steps = self.step;
        self.accumulate(parts, t_i)?;
        Ok(parts)
    }

    fn accumulate(&mut self, p: LossParts, t_i: f64) -> Result<(), KoopmanError> {
        let s = &mut self.epoch_sum;
        s.generator += p.generator;
        s.consistency += p.consistency;
        s.prediction += p.prediction;
        s.total += p.total;
        self.epoch_count += 1;
        if self.step.is_multiple_of(self.steps_per_epoch) {
            let n = self.epoch_count as f64;
            let train = LossParts {
                generator: s.generator / n,
                consistency: s.consistency / n,
                prediction: s.prediction / n,
                total: s.total / n,
            };
            let val = self.validation_generator_loss()?;
            let epoch = self.step / self.steps_per_epoch;
            if let Some(cfg) = &self.cfg.plateau {
                if self.plateau.observe(cfg, epoch, val) {
                    self.adam_encoder.lr = self.cfg.lr_encoder * self.plateau.scale;
                    self.adam_operator.lr = self.cfg.lr_operator * self.plateau.scale;
                }
            }
            self.report.final_val_generator = val;
            self.report.epochs.push(EpochLog {
                epoch,
                t_i,
                lr_scale: self.plateau.scale,
                train,
                val_generator: val,
            });
            self.epoch_sum = LossParts::default();
            self.epoch_count = 0;
        }
        Ok(())
    }

    pub fn validation_generator_loss(&self) -> Result<f64, KoopmanError> {
        let v = &self.data.val;
        generator_loss(&self.model, &v.x, &v.t, &v.v)
    }

    /// Runs to the end of the schedule, calling `on_epoch` after each epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<(), KoopmanError> {
        while !self.is_done() {
            self.step()?;
            if self.step.is_multiple_of(self.steps_per_epoch) {
                if let Some(log) = self.report.epochs.last() {
                    on_epoch(log);
                }
            }
        }
        Ok(())
    }
}

/// Builds the data from `prior` rollouts of the frozen `field` and trains a
/// model to the end of the schedule.
pub fn train_koopman<F: VectorField + ?Sized>(
    field: &F,
    prior: &Distribution2D,
    cfg: &KoopmanTrainConfig,
) -> Result<(KoopmanModel, KoopmanReport), KoopmanError> {
    cfg.validate()?;
    let data = KoopmanData::build(field, prior, cfg)?;
    let mut trainer = KoopmanTrainer::new(data, cfg.clone())?;
    trainer.run(|_| {})?;
    Ok(trainer.into_parts())
}
