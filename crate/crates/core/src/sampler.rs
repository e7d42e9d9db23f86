//! One-step and intermediate-time sampling by closed-form evolution of the
//! encoded prior draw.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use web_time::Instant;

use crate::datasets::Distribution2D;
use crate::koopman::KoopmanModel;
use crate::linalg::{expm, LinalgError, EVOLVE_T_SLACK};
use crate::ndcore::Tensor;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("query times must be ascending within [0, 1], got {0:?}")]
    BadTimes(Vec<f64>),
    #[error("sample count must be positive")]
    Empty,
    #[error("non-finite state at query time {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wall time per stage, summed over query times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode_ns: u64,
    pub expm_ns: u64,
    pub matmul_ns: u64,
    pub project_ns: u64,
}

impl StageTimings {
    pub fn total_ns(&self) -> u64 {
        self.encode_ns + self.expm_ns + self.matmul_ns + self.project_ns
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub seed: u64,
    pub n: usize,
    pub t_query: Vec<f64>,
    /// `[n, t_query.len(), 2]`
    pub states: Tensor,
    pub timings: StageTimings,
}

impl SampleRun {
    /// States at query index `k` as `[n, 2]`.
    pub fn at(&self, k: usize) -> Tensor {
        crate::cfm::states_at(&self.states, k)
    }

    /// The states at the last query time.
    pub fn last(&self) -> Tensor {
        self.at(self.t_query.len() - 1)
    }

    /// CSV with header `t,x,y,sample_id`, grouped by query time.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), SamplerError> {
        writeln!(w, "t,x,y,sample_id")?;
        for (k, t) in self.t_query.iter().enumerate() {
            let s = self.at(k);
            for i in 0..self.n {
                writeln!(w, "{t},{:.16e},{:.16e},{i}", s.get(i, 0), s.get(i, 1))?;
            }
        }
        Ok(())
    }
}

fn check_times(t: &[f64]) -> Result<(), SamplerError> {
    let in_range = t
        .iter()
        .all(|&s| (0.0..=1.0 + EVOLVE_T_SLACK).contains(&s));
    let ascending = t.windows(2).all(|w| w[0] <= w[1]);
    if t.is_empty() || !in_range || !ascending {
        return Err(SamplerError::BadTimes(t.to_vec()));
    }
    Ok(())
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos() as u64
}

/// Draws `n` prior samples with `seed` and evolves them to each query time.
pub fn koopman_sample(
    model: &KoopmanModel,
    prior: &Distribution2D,
    n: usize,
    t_query: &[f64],
    seed: u64,
) -> Result<SampleRun, SamplerError> {
    if n == 0 {
        return Err(SamplerError::Empty);
    }
    let x0 = prior.sample(n, seed);
    let mut run = koopman_sample_from(model, &x0, t_query)?;
    run.seed = seed;
    Ok(run)
}

/// Evolves given initial states. Only the state rows of each exponential
/// are applied, since the other coordinates are discarded by projection.
pub fn koopman_sample_from(
    model: &KoopmanModel,
    x0: &Tensor,
    t_query: &[f64],
) -> Result<SampleRun, SamplerError> {
    check_times(t_query)?;
    let n = x0.rows();
    if n == 0 {
        return Err(SamplerError::Empty);
    }
    let q = t_query.len();
    let mut timings = StageTimings::default();

    let start = Instant::now();
    let z0 = model.encode(x0, &vec![0.0; n]);
    timings.encode_ns = elapsed_ns(start);

    let mut states = vec![0.0; n * q * 2];
    for (k, &t) in t_query.iter().enumerate() {
        let start = Instant::now();
        let e = expm(&model.generator().scale(t))?;
        timings.expm_ns += elapsed_ns(start);

        let start = Instant::now();
        let xt = z0.matmul_bt(&e.slice_rows(0, 2));
        timings.matmul_ns += elapsed_ns(start);

        let start = Instant::now();
        if !xt.is_finite() {
            return Err(SamplerError::NonFinite(t));
        }
        for i in 0..n {
            let at = (i * q + k) * 2;
            states[at..at + 2].copy_from_slice(xt.row(i));
        }
        timings.project_ns += elapsed_ns(start);
    }
    Ok(SampleRun {
        seed: 0,
        n,
        t_query: t_query.to_vec(),
        states: Tensor::new([n, q, 2], states).expect("sizes agree"),
        timings,
    })
}

/// Koopman-implied velocity `(L z(x, t))[0:2]` at every grid point.
pub fn koopman_vector_field(model: &KoopmanModel, x_grid: &Tensor, t: f64) -> Tensor {
    model.vector_field(x_grid, &vec![t; x_grid.rows()])
}

/// `n × n` points spanning `[lo, hi]²`, row-major in `y` then `x`.
pub fn square_grid(n: usize, lo: f64, hi: f64) -> Tensor {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    Tensor::from_fn(n * n, 2, |r, c| {
        let k = if c == 0 { r % n } else { r / n };
        lo + step * k as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::evolve;

    fn model(l: Tensor) -> KoopmanModel {
        KoopmanModel::from_parts(None, vec![], l).unwrap()
    }

    fn decay() -> KoopmanModel {
        model(Tensor::from_rows(&[
            [-1.0, 0.0, 0.0, 0.0],
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0],
        ]))
    }

    #[test]
    fn time_zero_returns_prior_draws() {
        let m = decay();
        let run = koopman_sample(&m, &Distribution2D::Gauss, 64, &[0.0], 4).unwrap();
        assert_eq!(run.at(0), Distribution2D::Gauss.sample(64, 4));
    }

    #[test]
    fn linear_decay_matches_closed_form() {
        let m = decay();
        let run = koopman_sample(&m, &Distribution2D::Gauss, 32, &[0.5, 1.0], 1).unwrap();
        let x0 = Distribution2D::Gauss.sample(32, 1);
        for (k, t) in [0.5f64, 1.0].iter().enumerate() {
            let want = x0.scale((-t).exp());
            assert!(run.at(k).sub(&want).max_abs() < 1e-13);
        }
    }

    #[test]
    fn matches_full_evolution() {
        let l = Tensor::from_rows(&[
            [0.1, -0.5, 0.3, 0.2],
            [0.4, 0.0, -0.2, 0.1],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0],
        ]);
        let m = model(l.clone());
        let x0 = Distribution2D::Gauss.sample(16, 2);
        let run = koopman_sample_from(&m, &x0, &[0.7]).unwrap();
        let z = evolve(&l, &m.encode(&x0, &[0.0; 16]), 0.7).unwrap();
        assert!(run.at(0).sub(&z.slice_cols(0, 2)).max_abs() < 1e-14);
    }

    #[test]
    fn bad_times_rejected() {
        let m = decay();
        let x0 = Tensor::zeros([2, 2]);
        assert!(koopman_sample_from(&m, &x0, &[0.5, 0.2]).is_err());
        assert!(koopman_sample_from(&m, &x0, &[1.5]).is_err());
        assert!(koopman_sample_from(&m, &x0, &[]).is_err());
    }

    #[test]
    fn vector_field_of_linear_model() {
        let grid = square_grid(5, -8.0, 8.0);
        assert_eq!(koopman_vector_field(&decay(), &grid, 0.3), grid.scale(-1.0));
        let zero = model(Tensor::zeros([4, 4]));
        assert_eq!(koopman_vector_field(&zero, &grid, 0.3), Tensor::zeros([25, 2]));
    }

    #[test]
    fn csv_layout() {
        let run = koopman_sample(&decay(), &Distribution2D::Gauss, 2, &[0.0, 1.0], 0).unwrap();
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x,y,sample_id");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("1,") && lines[4].ends_with(",1"));
    }
}
