//! 2D priors/targets and exact minibatch optimal-transport pairing.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndcore::Tensor;
use crate::seeded_rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("batch sizes differ: {0} vs {1}")]
    UnequalBatches(usize, usize),
    #[error("points must be [n, 2], got {0:?}")]
    NotPlanar(Vec<usize>),
    #[error("batch of {0} exceeds the assignment limit of {MAX_OT_BATCH}")]
    BatchTooLarge(usize),
    #[error("unknown distribution `{0}` (expected gauss, 8g, 2m or sr)")]
    UnknownDistribution(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MAX_OT_BATCH: usize = 4096;

/// Supported 2D distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution2D {
    /// Standard normal.
    Gauss,
    /// Equal-weight mixture on a circle.
    EightGauss { radius: f64, std: f64 },
    /// Two interleaved half circles, affinely mapped into the training box.
    TwoMoons { noise: f64 },
    /// Swiss roll projected on its (x, z) coordinates.
    SwissRoll { noise: f64 },
}

impl Distribution2D {
    pub const EIGHT_GAUSS: Self = Self::EightGauss {
        radius: 5.0,
        std: 0.4,
    };
    pub const TWO_MOONS: Self = Self::TwoMoons { noise: 0.05 };
    pub const SWISS_ROLL: Self = Self::SwissRoll { noise: 0.5 };

    /// Moons scale/offset and roll scale that place the sets in `[-8, 8]²`.
    pub const MOONS_SCALE: f64 = 3.0;
    pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];
    pub const ROLL_SCALE: f64 = 0.15;

    pub fn short_name(&self) -> &'static str {
        match self {
            Self::Gauss => "gauss",
            Self::EightGauss { .. } => "8g",
            Self::TwoMoons { .. } => "2m",
            Self::SwissRoll { .. } => "sr",
        }
    }

    /// Centers of the mixture components (empty for other kinds).
    pub fn mode_centers(&self) -> Vec<[f64; 2]> {
        match *self {
            Self::EightGauss { radius, .. } => (0..8)
                .map(|k| {
                    let a = k as f64 * PI / 4.0;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// `n` i.i.d. samples as `[n, 2]`.
    pub fn sample(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        let normal = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
        for _ in 0..n {
            let p = match *self {
                Self::Gauss => [normal(rng), normal(rng)],
                Self::EightGauss { radius, std } => {
                    let k = rng.random_range(0..8u32) as f64;
                    let a = k * PI / 4.0;
                    [
                        radius * a.cos() + std * normal(rng),
                        radius * a.sin() + std * normal(rng),
                    ]
                }
                Self::TwoMoons { noise } => {
                    let theta = rng.random_range(0.0..PI);
                    let (x, y) = if rng.random_bool(0.5) {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    let x = x + noise * normal(rng);
                    let y = y + noise * normal(rng);
                    [
                        Self::MOONS_SCALE * (x - Self::MOONS_CENTER[0]),
                        Self::MOONS_SCALE * (y - Self::MOONS_CENTER[1]),
                    ]
                }
                Self::SwissRoll { noise } => {
                    let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                    let x = t * t.cos() + noise * normal(rng);
                    let z = t * t.sin() + noise * normal(rng);
                    [Self::ROLL_SCALE * x, Self::ROLL_SCALE * z]
                }
            };
            data.extend_from_slice(&p);
        }
        Tensor::new([n, 2], data).expect("2n values")
    }
}

impl fmt::Display for Distribution2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Distribution2D {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "g" | "gauss" | "gaussian" => Ok(Self::Gauss),
            "8g" | "eightgauss" | "8gauss" | "8gaussians" => Ok(Self::EIGHT_GAUSS),
            "2m" | "moons" | "twomoons" => Ok(Self::TWO_MOONS),
            "sr" | "swissroll" | "roll" => Ok(Self::SWISS_ROLL),
            _ => Err(DataError::UnknownDistribution(s.to_string())),
        }
    }
}

/// Pairing of a source batch with a target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    /// `permutation[i]` is the target row matched to source row `i`.
    pub permutation: Vec<usize>,
    /// `Σ ‖x0_i − x1_{π(i)}‖²`
    pub cost: f64,
}

impl CouplingPlan {
    /// Reorders `x1` so row `i` is the partner of `x0[i]`.
    pub fn apply(&self, x1: &Tensor) -> Tensor {
        x1.select_rows(&self.permutation)
    }
}

fn check_planar(x: &Tensor) -> Result<(), DataError> {
    if x.shape().len() != 2 || x.shape()[1] != 2 {
        return Err(DataError::NotPlanar(x.shape().to_vec()));
    }
    Ok(())
}

/// Squared-distance cost of pairing `x0[i]` with `x1[perm[i]]`.
pub fn pairing_cost(x0: &Tensor, x1: &Tensor, perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .map(|(i, &j)| {
            let dx = x0.get(i, 0) - x1.get(j, 0);
            let dy = x0.get(i, 1) - x1.get(j, 1);
            dx * dx + dy * dy
        })
        .sum()
}

/// Exact minimum-cost bijection between two equal-size point sets under
/// squared Euclidean cost (shortest augmenting path Hungarian method, O(b³)).
pub fn ot_pair(x0: &Tensor, x1: &Tensor) -> Result<CouplingPlan, DataError> {
    check_planar(x0)?;
    check_planar(x1)?;
    let n = x0.rows();
    if n != x1.rows() {
        return Err(DataError::UnequalBatches(n, x1.rows()));
    }
    if n > MAX_OT_BATCH {
        return Err(DataError::BatchTooLarge(n));
    }
    let cost = |i: usize, j: usize| {
        let dx = x0.get(i, 0) - x1.get(j, 0);
        let dy = x0.get(i, 1) - x1.get(j, 1);
        dx * dx + dy * dy
    };
    let assignment = hungarian(n, cost);
    let total = pairing_cost(x0, x1, &assignment);
    Ok(CouplingPlan {
        permutation: assignment,
        cost: total,
    })
}

/// Square assignment: returns `row -> column` minimizing the summed cost.
fn hungarian(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a virtual column used as the root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

/// Writes `[n, 2]` points as `x,y` rows with 17 significant digits.
pub fn write_points_csv<W: Write>(mut w: W, points: &Tensor) -> Result<(), DataError> {
    check_planar(points)?;
    writeln!(w, "x,y")?;
    for r in 0..points.rows() {
        writeln!(w, "{:.16e},{:.16e}", points.get(r, 0), points.get(r, 1))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `x` and `y` columns of any CSV with a header naming them.
/// When `t_filter` is set and the file has a `t` column, only rows whose
/// `t` equals it (within 1e-12) are kept.
pub fn read_points_csv<R: BufRead>(r: R, t_filter: Option<f64>) -> Result<Tensor, DataError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Csv("empty file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let (ix, iy) = match (find("x"), find("y")) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(DataError::Csv(format!("header `{header}` lacks x,y"))),
    };
    let it = find("t");
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |k: usize| -> Result<f64, DataError> {
            fields
                .get(k)
                .ok_or_else(|| DataError::Csv(format!("line {}: missing column {k}", lineno + 2)))?
                .parse::<f64>()
                .map_err(|e| DataError::Csv(format!("line {}: {e}", lineno + 2)))
        };
        if let (Some(t0), Some(k)) = (t_filter, it) {
            if (parse(k)? - t0).abs() > 1e-12 {
                continue;
            }
        }
        data.push(parse(ix)?);
        data.push(parse(iy)?);
    }
    let n = data.len() / 2;
    Ok(Tensor::new([n, 2], data).expect("pairs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names() {
        assert_eq!("8g".parse::<Distribution2D>().unwrap(), Distribution2D::EIGHT_GAUSS);
        assert_eq!("Gauss".parse::<Distribution2D>().unwrap(), Distribution2D::Gauss);
        assert!("ring".parse::<Distribution2D>().is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        for d in [
            Distribution2D::Gauss,
            Distribution2D::EIGHT_GAUSS,
            Distribution2D::TWO_MOONS,
            Distribution2D::SWISS_ROLL,
        ] {
            assert_eq!(d.sample(50, 4), d.sample(50, 4));
            assert_ne!(d.sample(50, 4), d.sample(50, 5));
        }
    }

    #[test]
    fn gauss_moments() {
        let x = Distribution2D::Gauss.sample(100_000, 0);
        for c in 0..2 {
            let col: Vec<f64> = (0..x.rows()).map(|r| x.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
        }
    }

    #[test]
    fn eight_gauss_mode_shares() {
        let d = Distribution2D::EIGHT_GAUSS;
        let centers = d.mode_centers();
        let x = d.sample(10_000, 1);
        let mut counts = [0usize; 8];
        for r in 0..x.rows() {
            let p = x.row(r);
            let k = (0..8)
                .min_by(|&a, &b| {
                    let da = (p[0] - centers[a][0]).powi(2) + (p[1] - centers[a][1]).powi(2);
                    let db = (p[0] - centers[b][0]).powi(2) + (p[1] - centers[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            counts[k] += 1;
        }
        for c in counts {
            let share = c as f64 / 10_000.0;
            assert!((0.09..=0.16).contains(&share), "share {share}");
        }
    }

    #[test]
    fn noiseless_moons_lie_on_half_circles() {
        let d = Distribution2D::TwoMoons { noise: 0.0 };
        let s = Distribution2D::MOONS_SCALE;
        let [cx, cy] = Distribution2D::MOONS_CENTER;
        // circle centers after the affine map; both radii equal the scale
        let upper = [-s * cx, -s * cy];
        let lower = [s * (1.0 - cx), s * (0.5 - cy)];
        let x = d.sample(2000, 3);
        for r in 0..x.rows() {
            let p = x.row(r);
            let ru = ((p[0] - upper[0]).hypot(p[1] - upper[1]) - s).abs();
            let rl = ((p[0] - lower[0]).hypot(p[1] - lower[1]) - s).abs();
            let on_upper = ru < 1e-9 && p[1] >= upper[1] - 1e-9;
            let on_lower = rl < 1e-9 && p[1] <= lower[1] + 1e-9;
            assert!(on_upper || on_lower, "point {p:?}");
        }
    }

    #[test]
    fn samples_stay_in_domain() {
        for d in [
            Distribution2D::Gauss,
            Distribution2D::EIGHT_GAUSS,
            Distribution2D::TWO_MOONS,
            Distribution2D::SWISS_ROLL,
        ] {
            let x = d.sample(20_000, 2);
            let inside = (0..x.rows())
                .filter(|&r| x.row(r).iter().all(|v| v.abs() <= 8.0))
                .count();
            assert!(inside as f64 / 20_000.0 >= 0.999, "{d}");
        }
    }

    #[test]
    fn ot_small_cases() {
        let a = Tensor::from_rows(&[[0.5, -1.0]]);
        let b = Tensor::from_rows(&[[2.0, 1.0]]);
        let plan = ot_pair(&a, &b).unwrap();
        assert_eq!(plan.permutation, vec![0]);
        assert_eq!(plan.cost, 1.5f64.powi(2) + 4.0);

        let x0 = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]);
        let x1 = Tensor::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        let plan = ot_pair(&x0, &x1).unwrap();
        assert_eq!(plan.permutation, vec![1, 0]);
        assert_eq!(plan.cost, 0.0);
    }

    #[test]
    fn ot_rejects_bad_input() {
        let a = Tensor::zeros([3, 2]);
        assert!(matches!(
            ot_pair(&a, &Tensor::zeros([2, 2])),
            Err(DataError::UnequalBatches(3, 2))
        ));
        assert!(matches!(
            ot_pair(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])),
            Err(DataError::NotPlanar(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let x = Distribution2D::SWISS_ROLL.sample(64, 8);
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &x).unwrap();
        assert!(buf.starts_with(b"x,y\n"));
        let back = read_points_csv(&buf[..], None).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn csv_reader_filters_time() {
        let text = "t,x,y,sample_id\n0,1,2,0\n1,3,4,0\n0,5,6,1\n1,7,8,1\n";
        let pts = read_points_csv(text.as_bytes(), Some(1.0)).unwrap();
        assert_eq!(pts.data(), &[3.0, 4.0, 7.0, 8.0]);
    }
}
