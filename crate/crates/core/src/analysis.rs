//! Evaluation: kernel two-sample distance, endpoint agreement with ODE
//! rollouts, eigen-decomposition of the generator and sampling throughput.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use web_time::Instant;

use crate::cfm::{integrate_endpoint, CfmError, OdeMethod, VectorField, TRAJECTORY_STEPS};
use crate::datasets::Distribution2D;
use crate::koopman::KoopmanModel;
use crate::linalg::{eig, CMatrix, EigenPairs, LinalgError};
use crate::ndcore::Tensor;
use crate::sampler::{koopman_sample_from, SamplerError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 2 points per set, got {n_a} and {n_b}")]
    TooFewPoints { n_a: usize, n_b: usize },
    #[error("point sets must be [n, 2], got {0:?} and {1:?}")]
    NotPlanar(Vec<usize>, Vec<usize>),
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("eigenvector basis is ill-conditioned (estimate {0:.3e})")]
    IllConditioned(f64),
    #[error("eigen residual {residual:.3e} exceeds {tolerance:.3e}; generator is not diagonalizable to tolerance")]
    Residual { residual: f64, tolerance: f64 },
    #[error("mode count {k} outside 1..={p}")]
    ModeCount { k: usize, p: usize },
    #[error("initial observable has length {got}, generator is {p}x{p}")]
    Length { got: usize, p: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Cfm(#[from] CfmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    /// V-statistic including the diagonal terms; never negative.
    Biased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sample.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Squared MMD.
    pub value: f64,
    pub kernel_bandwidth: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub estimator: MmdEstimator,
    /// Set when the pooled sample has no spread and the value was forced
    /// to 0, or when the median distance was 0 and the mean was used.
    pub degenerate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// `f(i)` for every row index, possibly in parallel; result order is fixed.
fn per_row(n: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if n >= 256 && rayon::current_num_threads() > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Median of all pairwise distances among the rows of `a` and `b` pooled.
pub fn median_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let n = pooled.len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, &mut hi, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if d.len() % 2 == 1 {
        return hi.sqrt();
    }
    let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (lo.sqrt() + hi.sqrt())
}

fn mean_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let n = pooled.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += sq_dist(pooled[i], pooled[j]).sqrt();
        }
    }
    s / (n * (n - 1) / 2) as f64
}

fn mean_kernel(a: &Tensor, b: &Tensor, gamma: f64) -> f64 {
    let rows = per_row(a.rows(), |i| {
        let ai = a.row(i);
        (0..b.rows())
            .map(|j| (-gamma * sq_dist(ai, b.row(j))).exp())
            .sum()
    });
    rows.iter().sum::<f64>() / (a.rows() * b.rows()) as f64
}

/// Biased squared MMD with the RBF kernel `exp(−‖x−y‖² / 2h²)`.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: Bandwidth) -> Result<MmdResult, AnalysisError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != 2 || b.cols() != 2 {
        return Err(AnalysisError::NotPlanar(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (n_a, n_b) = (a.rows(), b.rows());
    if n_a < 2 || n_b < 2 {
        return Err(AnalysisError::TooFewPoints { n_a, n_b });
    }
    let mut degenerate = false;
    let h = match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h.is_finite() && h > 0.0) {
                return Err(AnalysisError::BadBandwidth(h));
            }
            h
        }
        Bandwidth::Auto => {
            let med = median_pairwise_distance(a, b);
            if med > 0.0 {
                med
            } else {
                degenerate = true;
                let mean = mean_pairwise_distance(a, b);
                if mean == 0.0 {
                    return Ok(MmdResult {
                        value: 0.0,
                        kernel_bandwidth: 0.0,
                        n_a,
                        n_b,
                        estimator: MmdEstimator::Biased,
                        degenerate,
                    });
                }
                mean
            }
        }
    };
    let gamma = 1.0 / (2.0 * h * h);
    let kaa = mean_kernel(a, a, gamma);
    let kbb = mean_kernel(b, b, gamma);
    let kab = 0.5 * (mean_kernel(a, b, gamma) + mean_kernel(b, a, gamma));
    Ok(MmdResult {
        value: (kaa + kbb - 2.0 * kab).max(0.0),
        kernel_bandwidth: h,
        n_a,
        n_b,
        estimator: MmdEstimator::Biased,
        degenerate,
    })
}

/// Mean distance between one-step Koopman endpoints and 100-step RK4
/// endpoints of the field, from the same `n` prior draws.
pub fn endpoint_error<F: VectorField + ?Sized>(
    koop: &KoopmanModel,
    field: &F,
    prior: &Distribution2D,
    n: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let x0 = prior.sample(n, seed);
    let ours = koopman_sample_from(koop, &x0, &[1.0])?.last();
    let reference = integrate_endpoint(field, &x0, TRAJECTORY_STEPS, OdeMethod::Rk4)?;
    let total: f64 = (0..n)
        .map(|i| sq_dist(ours.row(i), reference.row(i)).sqrt())
        .sum();
    Ok(total / n as f64)
}

/// Above this condition estimate the eigenbasis is refused.
pub const MAX_BASIS_CONDITION: f64 = 1e12;

/// Eigenpair residuals must stay below this multiple of `‖L‖_F`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// Eigenpairs of `L` sorted by descending real part, and the coordinates
/// of one initial observable in that basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub pairs: EigenPairs,
    pub alphas: Vec<Complex64>,
    /// 1-norm condition estimate of the eigenvector matrix.
    pub condition: f64,
    /// Largest eigenpair residual relative to `‖L‖_F`.
    pub max_residual: f64,
}

/// Evolved observable when only some modes are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialReconstruction {
    /// Real part of the partial sum, length `p`.
    pub z: Tensor,
    /// Largest imaginary magnitude discarded by taking the real part.
    pub max_imag: f64,
    /// Number of modes actually summed.
    pub modes: usize,
    /// Set when `k` split a conjugate pair and was extended.
    pub extended: bool,
}

/// `α = V⁻¹ z0` over the sorted eigenbasis of `L`.
pub fn spectral_decompose(l: &Tensor, z0: &[f64]) -> Result<SpectralDecomposition, AnalysisError> {
    let p = l.rows();
    let pairs = eig(l)?.sorted_by_real_desc();
    if z0.len() != p {
        return Err(AnalysisError::Length { got: z0.len(), p });
    }
    let scale = l.frobenius_norm().max(f64::MIN_POSITIVE);
    let max_residual = pairs.residuals(l).into_iter().fold(0.0, f64::max) / scale;
    if max_residual > RESIDUAL_TOLERANCE {
        return Err(AnalysisError::Residual {
            residual: max_residual,
            tolerance: RESIDUAL_TOLERANCE,
        });
    }
    let inv = pairs.vectors.inverse().map_err(|e| match e {
        LinalgError::Singular => AnalysisError::IllConditioned(f64::INFINITY),
        other => other.into(),
    })?;
    let condition = pairs.vectors.norm1() * inv.norm1();
    if !(condition <= MAX_BASIS_CONDITION) {
        return Err(AnalysisError::IllConditioned(condition));
    }
    let z: Vec<Complex64> = z0.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let alphas = inv.matvec(&z);
    Ok(SpectralDecomposition {
        pairs,
        alphas,
        condition,
        max_residual,
    })
}

impl SpectralDecomposition {
    pub fn p(&self) -> usize {
        self.alphas.len()
    }

    fn sum_modes(&self, modes: &[usize], t: f64) -> (Tensor, f64) {
        let p = self.p();
        let mut acc = vec![Complex64::new(0.0, 0.0); p];
        for &i in modes {
            let c = self.alphas[i] * (self.pairs.values[i] * t).exp();
            for (r, a) in acc.iter_mut().enumerate() {
                *a += c * self.pairs.vectors[(r, i)];
            }
        }
        let max_imag = acc.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        (Tensor::new([p], acc.iter().map(|c| c.re).collect()).expect("length p"), max_imag)
    }

    /// `Σ_i α_i e^{λ_i t} v_i` over every mode.
    pub fn reconstruct(&self, t: f64) -> (Tensor, f64) {
        let all: Vec<usize> = (0..self.p()).collect();
        self.sum_modes(&all, t)
    }

    /// Partial sum over the `k` leading modes; a split conjugate pair pulls
    /// in the missing partner.
    pub fn progressive(&self, k: usize, t: f64) -> Result<PartialReconstruction, AnalysisError> {
        let p = self.p();
        if k == 0 || k > p {
            return Err(AnalysisError::ModeCount { k, p });
        }
        let partners = self.pairs.conjugate_partners();
        let mut chosen = vec![false; p];
        chosen[..k].fill(true);
        let mut extended = false;
        for i in 0..k {
            if !chosen[partners[i]] {
                chosen[partners[i]] = true;
                extended = true;
            }
        }
        let modes: Vec<usize> = (0..p).filter(|&i| chosen[i]).collect();
        let (z, max_imag) = self.sum_modes(&modes, t);
        Ok(PartialReconstruction {
            z,
            max_imag,
            modes: modes.len(),
            extended,
        })
    }

    /// CSV with header `index,re,im,alpha_re,alpha_im` over the leading
    /// `top` modes (all when `None`).
    pub fn write_csv<W: Write>(&self, mut w: W, top: Option<usize>) -> Result<(), AnalysisError> {
        writeln!(w, "index,re,im,alpha_re,alpha_im")?;
        let n = top.unwrap_or(self.p()).min(self.p());
        for i in 0..n {
            let v = self.pairs.values[i];
            let a = self.alphas[i];
            writeln!(w, "{i},{:.16e},{:.16e},{:.16e},{:.16e}", v.re, v.im, a.re, a.im)?;
        }
        Ok(())
    }

    /// Eigenvector basis, columns in sorted order.
    pub fn basis(&self) -> &CMatrix {
        &self.pairs.vectors
    }
}

/// Free-function form of [`SpectralDecomposition::progressive`].
pub fn progressive_reconstruction(
    decomp: &SpectralDecomposition,
    k: usize,
    t: f64,
) -> Result<PartialReconstruction, AnalysisError> {
    decomp.progressive(k, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub steps: usize,
    pub wall_ns: u64,
    pub samples_per_sec: f64,
    pub mmd: f64,
    /// Every timed repetition, in run order.
    pub runs_ns: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub n: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub bandwidth: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn find(&self, method: &str, steps: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.steps == steps)
    }

    /// CSV with header `method,steps,wall_ns,samples_per_sec,mmd`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "method,steps,wall_ns,samples_per_sec,mmd")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.6e},{:.6e}",
                r.method, r.steps, r.wall_ns, r.samples_per_sec, r.mmd
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n: usize,
    pub step_grid: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub bandwidth: Bandwidth,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 2048,
            step_grid: vec![10, 25, 50, 100],
            repetitions: 3,
            seed: 0,
            bandwidth: Bandwidth::Auto,
        }
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2
    }
}

fn time_runs(
    reps: usize,
    mut f: impl FnMut() -> Result<Tensor, AnalysisError>,
) -> Result<(Vec<u64>, Tensor), AnalysisError> {
    let out = f()?;
    let mut runs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let r = f()?;
        runs.push(start.elapsed().as_nanos() as u64);
        std::hint::black_box(r);
    }
    Ok((runs, out))
}

/// Koopman one-step sampling against Euler and RK4 integration of the field
/// at each step count. Every method starts from the same prior draws; one
/// untimed warm-up precedes the timed repetitions and the median is kept.
pub fn bench_sampling<F: VectorField + ?Sized>(
    koop: &KoopmanModel,
    field: &F,
    prior: &Distribution2D,
    target: &Distribution2D,
    cfg: &BenchConfig,
) -> Result<BenchTable, AnalysisError> {
    let reps = cfg.repetitions.max(1);
    let x0 = prior.sample(cfg.n, cfg.seed);
    let reference = target.sample(cfg.n, cfg.seed.wrapping_add(1));
    let h = match cfg.bandwidth {
        Bandwidth::Auto => median_pairwise_distance(&reference, &reference),
        Bandwidth::Fixed(h) => h,
    };
    let score = |x: &Tensor| -> Result<f64, AnalysisError> {
        Ok(mmd(x, &reference, Bandwidth::Fixed(h))?.value)
    };
    let row = |method: &str, steps: usize, runs: Vec<u64>, out: &Tensor| -> Result<BenchRow, AnalysisError> {
        let wall_ns = median(runs.clone()).max(1);
        Ok(BenchRow {
            method: method.into(),
            steps,
            wall_ns,
            samples_per_sec: cfg.n as f64 / (wall_ns as f64 * 1e-9),
            mmd: score(out)?,
            runs_ns: runs,
        })
    };

    let mut rows = Vec::new();
    let (runs, out) = time_runs(reps, || Ok(koopman_sample_from(koop, &x0, &[1.0])?.last()))?;
    rows.push(row("koopman", 1, runs, &out)?);
    for method in [OdeMethod::Euler, OdeMethod::Rk4] {
        for &steps in &cfg.step_grid {
            let (runs, out) =
                time_runs(reps, || Ok(integrate_endpoint(field, &x0, steps, method)?))?;
            rows.push(row(&method.to_string(), steps, runs, &out)?);
        }
    }
    Ok(BenchTable {
        n: cfg.n,
        repetitions: reps,
        seed: cfg.seed,
        bandwidth: h,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_score_zero() {
        let a = Distribution2D::Gauss.sample(50, 1);
        let r = mmd(&a, &a, Bandwidth::Auto).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.kernel_bandwidth > 0.0);
    }

    #[test]
    fn hand_computed_value() {
        let a = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0]]);
        let b = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        let r = mmd(&a, &b, Bandwidth::Fixed(1.0)).unwrap();
        assert!((r.value - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_bad_inputs() {
        let a = Tensor::full([3, 2], 1.5);
        let r = mmd(&a, &a, Bandwidth::Auto).unwrap();
        assert!(r.degenerate && r.value == 0.0);
        let one = Tensor::zeros([1, 2]);
        assert!(mmd(&one, &a, Bandwidth::Auto).is_err());
        assert!(mmd(&a, &a, Bandwidth::Fixed(0.0)).is_err());
    }

    #[test]
    fn median_distance_small_case() {
        // pooled distances: 1, 2, 3 (points on a line at 0, 1, 3)
        let a = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        let b = Tensor::from_rows(&[[3.0, 0.0]]);
        assert!((median_pairwise_distance(&a, &b) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_generator_coordinates() {
        let l = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]);
        let d = spectral_decompose(&l, &[3.0, 4.0]).unwrap();
        assert_eq!(d.pairs.values[0], Complex64::new(2.0, 0.0));
        // sorted: λ=2 (second axis) first
        assert!((d.alphas[0].norm() - 4.0).abs() < 1e-14);
        assert!((d.alphas[1].norm() - 3.0).abs() < 1e-14);
        let (z, im) = d.reconstruct(0.0);
        assert!((z.data()[0] - 3.0).abs() < 1e-14 && (z.data()[1] - 4.0).abs() < 1e-14);
        assert_eq!(im, 0.0);
    }

    #[test]
    fn progressive_extends_split_pairs() {
        let l = Tensor::from_rows(&[[0.0, -2.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, -1.0]]);
        let d = spectral_decompose(&l, &[1.0, 0.5, 2.0]).unwrap();
        let part = d.progressive(1, 0.4).unwrap();
        assert!(part.extended);
        assert_eq!(part.modes, 2);
        assert!(part.max_imag < 1e-12);
        assert!(d.progressive(0, 0.4).is_err());
        let full = d.progressive(3, 0.4).unwrap();
        assert!(!full.extended);
    }

    #[test]
    fn ill_conditioned_basis_refused() {
        let l = Tensor::from_rows(&[[1.0, 1.0], [0.0, 1.0]]);
        assert!(spectral_decompose(&l, &[1.0, 1.0]).is_err());
    }
}
