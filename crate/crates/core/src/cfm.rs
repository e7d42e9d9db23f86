//! Conditional flow matching: conditional paths, the regression loss, a
//! trainer for the velocity field, fixed-step ODE integration and the
//! trajectory corpus used to fit Koopman models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{blob_checksum, tensors_to_blob};
use crate::datasets::{ot_pair, DataError, Distribution2D};
use crate::ndcore::{NdError, Tape, Tensor, Var};
use crate::nn::{mlp_forward, AdamState, Mlp, MlpSpec, NnError};
use crate::{seeded_rng, seeded_stream};

#[derive(Debug, Error)]
pub enum CfmError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("path batch shapes disagree: {0}")]
    BatchShape(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("non-finite state at integration step {step}")]
    NonFiniteState { step: usize },
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("trajectory file: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A (possibly learned) time-dependent velocity field on the plane.
pub trait VectorField: Sync {
    /// Velocity at each row of `x` (`[b, 2]`) at per-row times `t`.
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Tensor;

    /// Content hash identifying the field's parameters (0 if not applicable).
    fn fingerprint(&self) -> u32 {
        0
    }
}

/// Closed-form field evaluated row by row.
pub struct AnalyticField<F>(pub F);

impl<F> VectorField for AnalyticField<F>
where
    F: Fn([f64; 2], f64) -> [f64; 2] + Sync,
{
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Tensor {
        let mut out = Vec::with_capacity(x.len());
        for (r, &tr) in t.iter().enumerate().take(x.rows()) {
            let p = x.row(r);
            out.extend_from_slice(&(self.0)([p[0], p[1]], tr));
        }
        Tensor::new([x.rows(), 2], out).expect("2 per row")
    }
}

/// The learned field `v_θ(x, t)`: an MLP on `[x₁, x₂, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldModel {
    pub net: Mlp,
}

impl VectorFieldModel {
    pub fn default_spec() -> MlpSpec {
        MlpSpec::new(3, 64, 3, 2)
    }

    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self, CfmError> {
        Self::check_spec(&spec)?;
        Ok(Self {
            net: Mlp::new(spec, seed)?,
        })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self, CfmError> {
        Self::check_spec(&spec)?;
        Ok(Self {
            net: Mlp::from_params(spec, params)?,
        })
    }

    fn check_spec(spec: &MlpSpec) -> Result<(), CfmError> {
        if spec.input_dim != 3 || spec.output_dim != 2 {
            return Err(NnError::InvalidSpec(format!(
                "velocity field needs 3 inputs and 2 outputs, got {}→{}",
                spec.input_dim, spec.output_dim
            ))
            .into());
        }
        Ok(())
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.net.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.net.params
    }
}

/// `[x₁, x₂, t]` input rows.
pub fn time_augment(x: &Tensor, t: &[f64]) -> Tensor {
    assert_eq!(x.rows(), t.len(), "one time per row");
    Tensor::concat_cols(&[x, &Tensor::column(t)])
}

impl VectorField for VectorFieldModel {
    fn velocity(&self, x: &Tensor, t: &[f64]) -> Tensor {
        self.net.forward(&time_augment(x, t))
    }

    fn fingerprint(&self) -> u32 {
        blob_checksum(&tensors_to_blob(&self.net.params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    /// Independent prior/target pairs.
    Gaussian,
    /// Minibatch pairs matched by exact optimal transport.
    Ot,
}

impl FromStr for PathKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gauss" | "gaussian" => Ok(Self::Gaussian),
            "ot" => Ok(Self::Ot),
            _ => Err(format!("unknown path `{s}` (expected gauss or ot)")),
        }
    }
}

impl std::fmt::Display for PathKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gauss",
            Self::Ot => "ot",
        })
    }
}

/// Conditional probability path `N(t·x1 + (1−t)·x0, σ²I)` with conditional
/// velocity `x1 − x0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPath {
    pub kind: PathKind,
    pub sigma: f64,
}

impl ConditionalPath {
    pub fn gaussian() -> Self {
        Self {
            kind: PathKind::Gaussian,
            sigma: 0.1,
        }
    }

    pub fn ot() -> Self {
        Self {
            kind: PathKind::Ot,
            sigma: 0.01,
        }
    }

    pub fn of_kind(kind: PathKind) -> Self {
        match kind {
            PathKind::Gaussian => Self::gaussian(),
            PathKind::Ot => Self::ot(),
        }
    }
}

/// Regression batch: points on the path, their times and target velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub x_t: Tensor,
    pub t: Vec<f64>,
    pub u_t: Tensor,
}

/// Samples `x_t` and `u_t` for given endpoint pairs. For an OT path the
/// pairs must already be matched (see [`draw_batch`]).
pub fn path_sample<R: Rng>(
    path: &ConditionalPath,
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
    rng: &mut R,
) -> Result<PathBatch, CfmError> {
    let b = x0.rows();
    if x0.shape() != [b, 2] || x1.shape() != [b, 2] || t.len() != b {
        return Err(CfmError::BatchShape(format!(
            "x0 {:?}, x1 {:?}, {} times",
            x0.shape(),
            x1.shape(),
            t.len()
        )));
    }
    if let Some(&bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CfmError::TimeOutOfRange(bad));
    }
    let mut x_t = Vec::with_capacity(2 * b);
    let mut u_t = Vec::with_capacity(2 * b);
    for (i, &ti) in t.iter().enumerate() {
        for c in 0..2 {
            let a = x0.get(i, c);
            let z = x1.get(i, c);
            let noise = if path.sigma > 0.0 {
                path.sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            x_t.push(ti * z + (1.0 - ti) * a + noise);
            u_t.push(z - a);
        }
    }
    Ok(PathBatch {
        x_t: Tensor::new([b, 2], x_t)?,
        t: t.to_vec(),
        u_t: Tensor::new([b, 2], u_t)?,
    })
}

/// Draws a fresh prior/target minibatch, pairs it according to the path
/// kind and samples uniform times.
pub fn draw_batch<R: Rng>(
    path: &ConditionalPath,
    prior: &Distribution2D,
    target: &Distribution2D,
    batch: usize,
    rng: &mut R,
) -> Result<PathBatch, CfmError> {
    let x0 = prior.sample_with(batch, rng);
    let mut x1 = target.sample_with(batch, rng);
    if path.kind == PathKind::Ot {
        let plan = ot_pair(&x0, &x1)?;
        x1 = plan.apply(&x1);
    }
    let t: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
    path_sample(path, &x0, &x1, &t, rng)
}

/// `mean_i ‖v_θ(x_t, t) − u_t‖²`
pub fn cfm_loss(model: &VectorFieldModel, batch: &PathBatch) -> f64 {
    let v = model.velocity(&batch.x_t, &batch.t);
    v.sub(&batch.u_t).sq_norm() / batch.x_t.rows() as f64
}

/// [`cfm_loss`] recorded on a tape, differentiable in `params`.
pub fn cfm_loss_on_tape<'t>(
    tape: &'t Tape,
    spec: &MlpSpec,
    params: &[Var<'t>],
    batch: &PathBatch,
) -> Var<'t> {
    let input = tape.constant(time_augment(&batch.x_t, &batch.t));
    let target = tape.constant(batch.u_t.clone());
    mlp_forward(spec, params, &input)
        .sub(target)
        .mean_row_sq_norm()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfmTrainConfig {
    pub spec: MlpSpec,
    pub path: ConditionalPath,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CfmTrainConfig {
    fn default() -> Self {
        Self {
            spec: VectorFieldModel::default_spec(),
            path: ConditionalPath::ot(),
            steps: 20_000,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Incremental CFM training; [`train_cfm`] runs it to completion.
pub struct CfmTrainer {
    prior: Distribution2D,
    target: Distribution2D,
    config: CfmTrainConfig,
    model: VectorFieldModel,
    adam: AdamState,
    rng: rand_chacha::ChaCha8Rng,
    step: usize,
    losses: Vec<f64>,
}

impl CfmTrainer {
    pub fn new(
        prior: Distribution2D,
        target: Distribution2D,
        config: CfmTrainConfig,
    ) -> Result<Self, CfmError> {
        if config.batch == 0 {
            return Err(CfmError::ZeroCount("batch"));
        }
        let model = VectorFieldModel::new(config.spec, config.seed)?;
        let adam = AdamState::new(config.lr, model.params())?;
        Ok(Self {
            prior,
            target,
            rng: seeded_stream(config.seed, 1),
            config,
            model,
            adam,
            step: 0,
            losses: Vec::new(),
        })
    }

    /// One optimizer step; returns the minibatch loss before the update.
    pub fn step(&mut self) -> Result<f64, CfmError> {
        let batch = draw_batch(
            &self.config.path,
            &self.prior,
            &self.target,
            self.config.batch,
            &mut self.rng,
        )?;
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = self
            .model
            .params()
            .iter()
            .map(|p| tape.var(p.clone()))
            .collect();
        let loss = cfm_loss_on_tape(&tape, &self.config.spec, &vars, &batch);
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(CfmError::Diverged {
                step: self.step,
                loss: value,
            });
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
        self.adam
            .update(&mut self.model.net.params, &grads)
            .map_err(|_| CfmError::Diverged {
                step: self.step,
                loss: value,
            })?;
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn model(&self) -> &VectorFieldModel {
        &self.model
    }

    pub fn into_parts(self) -> (VectorFieldModel, Vec<f64>) {
        (self.model, self.losses)
    }
}

/// Trains a velocity field from `prior` to `target`. Returns the model and
/// the per-step minibatch losses.
pub fn train_cfm(
    prior: &Distribution2D,
    target: &Distribution2D,
    config: &CfmTrainConfig,
) -> Result<(VectorFieldModel, Vec<f64>), CfmError> {
    if config.steps == 0 {
        return Err(CfmError::ZeroCount("steps"));
    }
    let mut trainer = CfmTrainer::new(*prior, *target, config.clone())?;
    for _ in 0..config.steps {
        trainer.step()?;
    }
    Ok(trainer.into_parts())
}

/// Means of consecutive non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

impl FromStr for OdeMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Self::Euler),
            "rk4" => Ok(Self::Rk4),
            _ => Err(format!("unknown method `{s}` (expected euler or rk4)")),
        }
    }
}

impl std::fmt::Display for OdeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Rk4 => "rk4",
        })
    }
}

/// Runs a fixed-step solve from t = 0 to 1, calling `visit(k, x_k, k1)` at
/// every grid point, where `k1` is the field at `(x_k, t_k)` when the method
/// computed it (always for k < n_steps).
fn solve<F, V>(
    field: &F,
    x0: &Tensor,
    n_steps: usize,
    method: OdeMethod,
    mut visit: V,
) -> Result<Tensor, CfmError>
where
    F: VectorField + ?Sized,
    V: FnMut(usize, &Tensor, Option<&Tensor>),
{
    if n_steps == 0 {
        return Err(CfmError::ZeroCount("n_steps"));
    }
    let b = x0.rows();
    let h = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    let times = |k: usize| vec![k as f64 / n_steps as f64; b];
    for k in 0..n_steps {
        let t0 = times(k);
        let k1 = field.velocity(&x, &t0);
        visit(k, &x, Some(&k1));
        match method {
            OdeMethod::Euler => x.axpy(h, &k1),
            OdeMethod::Rk4 => {
                let tm = vec![(k as f64 + 0.5) / n_steps as f64; b];
                let mut xa = x.clone();
                xa.axpy(0.5 * h, &k1);
                let k2 = field.velocity(&xa, &tm);
                let mut xb = x.clone();
                xb.axpy(0.5 * h, &k2);
                let k3 = field.velocity(&xb, &tm);
                let mut xc = x.clone();
                xc.axpy(h, &k3);
                let k4 = field.velocity(&xc, &times(k + 1));
                x.axpy(h / 6.0, &k1);
                x.axpy(h / 3.0, &k2);
                x.axpy(h / 3.0, &k3);
                x.axpy(h / 6.0, &k4);
            }
        }
        if !x.is_finite() {
            return Err(CfmError::NonFiniteState { step: k + 1 });
        }
    }
    visit(n_steps, &x, None);
    Ok(x)
}

/// Integrates `dx/dt = v(x, t)` on `[0, 1]`; returns `[b, n_steps+1, 2]`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x0: &Tensor,
    n_steps: usize,
    method: OdeMethod,
) -> Result<Tensor, CfmError> {
    let b = x0.rows();
    let width = n_steps + 1;
    let mut out = vec![0.0; b * width * 2];
    solve(field, x0, n_steps, method, |k, x, _| {
        for i in 0..b {
            let at = (i * width + k) * 2;
            out[at..at + 2].copy_from_slice(x.row(i));
        }
    })?;
    Ok(Tensor::new([b, width, 2], out)?)
}

/// Final state of [`integrate`] without storing the path.
pub fn integrate_endpoint<F: VectorField + ?Sized>(
    field: &F,
    x0: &Tensor,
    n_steps: usize,
    method: OdeMethod,
) -> Result<Tensor, CfmError> {
    solve(field, x0, n_steps, method, |_, _, _| {})
}

/// Row `k` of every trajectory in a `[b, steps, 2]` tensor.
pub fn states_at(states: &Tensor, k: usize) -> Tensor {
    let (b, width) = (states.shape()[0], states.shape()[1]);
    let mut out = Vec::with_capacity(2 * b);
    for i in 0..b {
        let at = (i * width + k) * 2;
        out.extend_from_slice(&states.data()[at..at + 2]);
    }
    Tensor::new([b, 2], out).expect("2 per row")
}

/// Number of integration steps in a trajectory corpus.
pub const TRAJECTORY_STEPS: usize = 100;

/// Batched RK4 rollouts of a field from prior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    /// `[n_traj, 101, 2]`
    pub states: Tensor,
    /// `[101]`, uniform on `[0, 1]`
    pub times: Tensor,
    /// `[n_traj, 101, 2]`, the field at each state
    pub velocities: Tensor,
    /// `[n_traj, 2]`
    pub terminals: Tensor,
    pub seed: u64,
    pub model_checksum: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryManifest {
    format: String,
    n_traj: usize,
    n_steps: usize,
    seed: u64,
    model_checksum: u32,
    blob: String,
    blob_checksum: u32,
    order: Vec<String>,
}

const TRAJECTORY_FORMAT: &str = "kflow-trajectories/1";

impl TrajectorySet {
    pub fn n_traj(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.states.shape()[1] - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times.data()[k]
    }

    /// States at grid index `k`, `[n_traj, 2]`.
    pub fn states_at(&self, k: usize) -> Tensor {
        states_at(&self.states, k)
    }

    pub fn velocities_at(&self, k: usize) -> Tensor {
        states_at(&self.velocities, k)
    }

    fn blob_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    /// Writes a JSON manifest at `manifest` and the float blob beside it
    /// (same stem, `.bin`), in the order states, times, velocities, terminals.
    pub fn save(&self, manifest: &Path) -> Result<(), CfmError> {
        let blob = tensors_to_blob(&[
            self.states.clone(),
            self.times.clone(),
            self.velocities.clone(),
            self.terminals.clone(),
        ]);
        let blob_path = Self::blob_path(manifest);
        let m = TrajectoryManifest {
            format: TRAJECTORY_FORMAT.into(),
            n_traj: self.n_traj(),
            n_steps: self.n_steps(),
            seed: self.seed,
            model_checksum: self.model_checksum,
            blob: blob_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_checksum: blob_checksum(&blob),
            order: ["states", "times", "velocities", "terminals"]
                .map(String::from)
                .to_vec(),
        };
        fs::write(&blob_path, &blob)?;
        let mut f = fs::File::create(manifest)?;
        serde_json::to_writer_pretty(&mut f, &m).map_err(|e| CfmError::Format(e.to_string()))?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(manifest: &Path) -> Result<Self, CfmError> {
        let text = fs::read_to_string(manifest)?;
        let m: TrajectoryManifest =
            serde_json::from_str(&text).map_err(|e| CfmError::Format(e.to_string()))?;
        if m.format != TRAJECTORY_FORMAT {
            return Err(CfmError::Format(format!("unknown format `{}`", m.format)));
        }
        let blob_path = manifest.with_file_name(&m.blob);
        let blob = fs::read(&blob_path)?;
        if blob_checksum(&blob) != m.blob_checksum {
            return Err(CfmError::Format("blob checksum mismatch".into()));
        }
        let w = m.n_steps + 1;
        let shapes = vec![
            vec![m.n_traj, w, 2],
            vec![w],
            vec![m.n_traj, w, 2],
            vec![m.n_traj, 2],
        ];
        let mut t = crate::checkpoint::blob_to_tensors(&blob, &shapes)
            .map_err(|e| CfmError::Format(e.to_string()))?
            .into_iter();
        Ok(Self {
            states: t.next().expect("4 tensors"),
            times: t.next().expect("4 tensors"),
            velocities: t.next().expect("4 tensors"),
            terminals: t.next().expect("4 tensors"),
            seed: m.seed,
            model_checksum: m.model_checksum,
        })
    }
}

/// 100-step RK4 rollouts from `n_traj` prior draws, recording the field at
/// every grid point.
pub fn generate_trajectories<F: VectorField + ?Sized>(
    field: &F,
    prior: &Distribution2D,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectorySet, CfmError> {
    if n_traj == 0 {
        return Err(CfmError::ZeroCount("n_traj"));
    }
    let x0 = prior.sample_with(n_traj, &mut seeded_rng(seed));
    let n = TRAJECTORY_STEPS;
    let w = n + 1;
    let mut states = vec![0.0; n_traj * w * 2];
    let mut velocities = vec![0.0; n_traj * w * 2];
    let terminal = solve(field, &x0, n, OdeMethod::Rk4, |k, x, k1| {
        let owned;
        let v = match k1 {
            Some(v) => v,
            None => {
                owned = field.velocity(x, &vec![k as f64 / n as f64; x.rows()]);
                &owned
            }
        };
        for i in 0..n_traj {
            let at = (i * w + k) * 2;
            states[at..at + 2].copy_from_slice(x.row(i));
            velocities[at..at + 2].copy_from_slice(v.row(i));
        }
    })?;
    let times: Vec<f64> = (0..w).map(|k| k as f64 / n as f64).collect();
    Ok(TrajectorySet {
        states: Tensor::new([n_traj, w, 2], states)?,
        times: Tensor::new([w], times)?,
        velocities: Tensor::new([n_traj, w, 2], velocities)?,
        terminals: terminal,
        seed,
        model_checksum: field.fingerprint(),
    })
}
