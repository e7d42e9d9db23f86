//! Eigendecomposition of a general real matrix: Householder reduction to
//! Hessenberg form, Francis double-shift QR to real Schur form, then back
//! substitution for the eigenvectors (the EISPACK `orthes`/`hqr2` scheme).
//! Symmetric input takes a cyclic Jacobi path so its spectrum is exactly real.

use std::cmp::Ordering;

use num_complex::Complex64;

use super::{CMatrix, LinalgError};
use crate::ndcore::Tensor;

/// Eigenvalues with matching eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<Complex64>,
    /// Column `i` is the unit-norm eigenvector of `values[i]`.
    pub vectors: CMatrix,
    /// True once ordered by descending real part.
    pub sorted: bool,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Orders by descending real part, then descending imaginary part, then
    /// original position.
    pub fn sort_by_real_desc(&mut self) {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (self.values[a], self.values[b]);
            y.re.partial_cmp(&x.re)
                .unwrap_or(Ordering::Equal)
                .then(y.im.partial_cmp(&x.im).unwrap_or(Ordering::Equal))
                .then(a.cmp(&b))
        });
        self.values = order.iter().map(|&i| self.values[i]).collect();
        self.vectors = self.vectors.permute_columns(&order);
        self.sorted = true;
    }

    pub fn sorted_by_real_desc(mut self) -> Self {
        self.sort_by_real_desc();
        self
    }

    /// `‖A v_i − λ_i v_i‖₂` for every column.
    pub fn residuals(&self, a: &Tensor) -> Vec<f64> {
        let n = self.values.len();
        (0..n)
            .map(|i| {
                let v = self.vectors.column(i);
                (0..n)
                    .map(|r| {
                        let av: Complex64 = (0..n).map(|c| v[c] * a.get(r, c)).sum();
                        (av - self.values[i] * v[r]).norm_sqr()
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Index of the conjugate partner of each eigenvalue (itself if real).
    pub fn conjugate_partners(&self) -> Vec<usize> {
        let n = self.values.len();
        let mut partner: Vec<usize> = (0..n).collect();
        let mut taken = vec![false; n];
        for i in 0..n {
            if taken[i] || self.values[i].im == 0.0 {
                continue;
            }
            let target = self.values[i].conj();
            let best = (0..n)
                .filter(|&j| j != i && !taken[j] && self.values[j].im != 0.0)
                .min_by(|&a, &b| {
                    (self.values[a] - target)
                        .norm()
                        .total_cmp(&(self.values[b] - target).norm())
                });
            if let Some(j) = best {
                partner[i] = j;
                partner[j] = i;
                taken[i] = true;
                taken[j] = true;
            }
        }
        partner
    }
}

/// All eigenpairs of a real square matrix (unsorted).
pub fn eig(a: &Tensor) -> Result<EigenPairs, LinalgError> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(LinalgError::NotSquare(s.to_vec()));
    }
    a.check_finite("matrix")?;
    let n = s[0];
    if n == 0 {
        return Ok(EigenPairs {
            values: Vec::new(),
            vectors: CMatrix::zeros(0, 0),
            sorted: true,
        });
    }
    let symmetric = (0..n).all(|i| (0..i).all(|j| a.get(i, j) == a.get(j, i)));
    let pairs = if symmetric {
        jacobi(a)?
    } else {
        general(a)?
    };
    Ok(pairs)
}

/// Maximum QR sweeps per unit of matrix dimension.
pub const SWEEPS_PER_DIM: usize = 100;

struct Mat {
    n: usize,
    a: Vec<f64>,
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.a[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.a[i * self.n + j]
    }
}

impl Mat {
    fn identity(n: usize) -> Self {
        let mut m = Self {
            n,
            a: vec![0.0; n * n],
        };
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }
}

fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    if yr.abs() > yi.abs() {
        let r = yi / yr;
        let d = yr + r * yi;
        ((xr + r * xi) / d, (xi - r * xr) / d)
    } else {
        let r = yr / yi;
        let d = yi + r * yr;
        ((r * xr + xi) / d, (r * xi - xr) / d)
    }
}

/// Householder reduction to upper Hessenberg form; returns the accumulated
/// orthogonal transform.
fn orthes(h: &mut Mat) -> Mat {
    let n = h.n;
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let f = (m..=high).rev().map(|i| ort[i] * h[(i, j)]).sum::<f64>() / hh;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let f = (m..=high).rev().map(|j| ort[j] * h[(i, j)]).sum::<f64>() / hh;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
    }

    let mut v = Mat::identity(n);
    for m in (1..high).rev() {
        if h[(m, m - 1)] == 0.0 {
            continue;
        }
        for i in m + 1..=high {
            ort[i] = h[(i, m - 1)];
        }
        for j in m..=high {
            let mut g: f64 = (m..=high).map(|i| ort[i] * v[(i, j)]).sum();
            g = (g / ort[m]) / h[(m, m - 1)];
            for i in m..=high {
                v[(i, j)] += g * ort[i];
            }
        }
    }
    v
}

/// Real Schur iteration with eigenvector back substitution. On return `d`
/// and `e` hold real and imaginary parts and `v` the real eigenvector basis
/// (complex pairs split over two adjacent columns).
fn hqr2(h: &mut Mat, v: &mut Mat, d: &mut [f64], e: &mut [f64]) -> Result<(), LinalgError> {
    let nn = h.n;
    let low: isize = 0;
    let high = nn - 1;
    let eps = f64::EPSILON;
    let mut exshift = 0.0;
    let (mut p, mut q): (f64, f64);
    let (mut r, mut s, mut z) = (0.0, 0.0, 0.0);
    let (mut t, mut w, mut x, mut y);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }

    let max_sweeps = SWEEPS_PER_DIM * nn;
    let mut sweeps = 0usize;
    let mut n = nn as isize - 1;
    let mut iter = 0;
    while n >= low {
        let nu = n as usize;
        // single small subdiagonal element
        let mut l = n;
        while l > low {
            let lu = l as usize;
            s = h[(lu - 1, lu - 1)].abs() + h[(lu, lu)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(lu, lu - 1)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // one root
            h[(nu, nu)] += exshift;
            d[nu] = h[(nu, nu)];
            e[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // two roots
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(nu, nu)] += exshift;
            h[(nu - 1, nu - 1)] += exshift;
            x = h[(nu, nu)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[nu - 1] = x + z;
                d[nu] = d[nu - 1];
                if z != 0.0 {
                    d[nu] = x - w / z;
                }
                e[nu - 1] = 0.0;
                e[nu] = 0.0;
                x = h[(nu, nu - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in nu - 1..nn {
                    z = h[(nu - 1, j)];
                    h[(nu - 1, j)] = q * z + p * h[(nu, j)];
                    h[(nu, j)] = q * h[(nu, j)] - p * z;
                }
                for i in 0..=nu {
                    z = h[(i, nu - 1)];
                    h[(i, nu - 1)] = q * z + p * h[(i, nu)];
                    h[(i, nu)] = q * h[(i, nu)] - p * z;
                }
                for i in 0..=high {
                    z = v[(i, nu - 1)];
                    v[(i, nu - 1)] = q * z + p * v[(i, nu)];
                    v[(i, nu)] = q * v[(i, nu)] - p * z;
                }
            } else {
                d[nu - 1] = x + p;
                d[nu] = x + p;
                e[nu - 1] = z;
                e[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            sweeps += 1;
            if sweeps > max_sweeps {
                return Err(LinalgError::NoConvergence { sweeps: max_sweeps });
            }
            let lu = l as usize;
            x = h[(nu, nu)];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[(nu - 1, nu - 1)];
                w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            }
            // exceptional shifts
            if iter == 10 {
                exshift += x;
                for i in 0..=nu {
                    h[(i, i)] -= x;
                }
                s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in 0..=nu {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;

            // two consecutive small subdiagonal elements
            let mut m = nu - 2;
            loop {
                z = h[(m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(m + 1, m)] + h[(m, m + 1)];
                q = h[(m + 1, m + 1)] - z - r - s;
                r = h[(m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == lu {
                    break;
                }
                if h[(m, m - 1)].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[(m - 1, m - 1)].abs() + z.abs() + h[(m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                h[(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            // double QR step on rows l..=n, columns m..=n
            let mut k = m;
            while k < nu {
                let notlast = k != nu - 1;
                if k != m {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[(k, k - 1)] = -s * x;
                    } else if lu != m {
                        h[(k, k - 1)] = -h[(k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..nn {
                        p = h[(k, j)] + q * h[(k + 1, j)];
                        if notlast {
                            p += r * h[(k + 2, j)];
                            h[(k + 2, j)] -= p * z;
                        }
                        h[(k, j)] -= p * x;
                        h[(k + 1, j)] -= p * y;
                    }
                    for i in 0..=nu.min(k + 3) {
                        p = x * h[(i, k)] + y * h[(i, k + 1)];
                        if notlast {
                            p += z * h[(i, k + 2)];
                            h[(i, k + 2)] -= p * r;
                        }
                        h[(i, k)] -= p;
                        h[(i, k + 1)] -= p * q;
                    }
                    for i in 0..=high {
                        p = x * v[(i, k)] + y * v[(i, k + 1)];
                        if notlast {
                            p += z * v[(i, k + 2)];
                            v[(i, k + 2)] -= p * r;
                        }
                        v[(i, k)] -= p;
                        v[(i, k + 1)] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }

    if norm == 0.0 {
        return Ok(());
    }

    // back substitution on the quasi-triangular form
    for n in (0..nn).rev() {
        p = d[n];
        q = e[n];
        if q == 0.0 {
            let mut l = n;
            h[(n, n)] = 1.0;
            for i in (0..n).rev() {
                w = h[(i, i)] - p;
                r = (l..=n).map(|j| h[(i, j)] * h[(j, n)]).sum();
                if e[i] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        h[(i, n)] = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                    } else {
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        q = (d[i] - p) * (d[i] - p) + e[i] * e[i];
                        t = (x * s - z * r) / q;
                        h[(i, n)] = t;
                        h[(i + 1, n)] = if x.abs() > z.abs() {
                            (-r - w * t) / x
                        } else {
                            (-s - y * t) / z
                        };
                    }
                    t = h[(i, n)].abs();
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            h[(j, n)] /= t;
                        }
                    }
                }
            }
        } else if q < 0.0 {
            let mut l = n - 1;
            if h[(n, n - 1)].abs() > h[(n - 1, n)].abs() {
                h[(n - 1, n - 1)] = q / h[(n, n - 1)];
                h[(n - 1, n)] = -(h[(n, n)] - p) / h[(n, n - 1)];
            } else {
                let (cr, ci) = cdiv(0.0, -h[(n - 1, n)], h[(n - 1, n - 1)] - p, q);
                h[(n - 1, n - 1)] = cr;
                h[(n - 1, n)] = ci;
            }
            h[(n, n - 1)] = 0.0;
            h[(n, n)] = 1.0;
            for i in (0..n.saturating_sub(1)).rev() {
                let mut ra = 0.0;
                let mut sa = 0.0;
                for j in l..=n {
                    ra += h[(i, j)] * h[(j, n - 1)];
                    sa += h[(i, j)] * h[(j, n)];
                }
                w = h[(i, i)] - p;
                if e[i] < 0.0 {
                    z = w;
                    r = ra;
                    s = sa;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        let (cr, ci) = cdiv(-ra, -sa, w, q);
                        h[(i, n - 1)] = cr;
                        h[(i, n)] = ci;
                    } else {
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        let mut vr = (d[i] - p) * (d[i] - p) + e[i] * e[i] - q * q;
                        let vi = (d[i] - p) * 2.0 * q;
                        if vr == 0.0 && vi == 0.0 {
                            vr = eps * norm * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                        }
                        let (cr, ci) =
                            cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi);
                        h[(i, n - 1)] = cr;
                        h[(i, n)] = ci;
                        if x.abs() > z.abs() + q.abs() {
                            h[(i + 1, n - 1)] = (-ra - w * h[(i, n - 1)] + q * h[(i, n)]) / x;
                            h[(i + 1, n)] = (-sa - w * h[(i, n)] - q * h[(i, n - 1)]) / x;
                        } else {
                            let (cr, ci) =
                                cdiv(-r - y * h[(i, n - 1)], -s - y * h[(i, n)], z, q);
                            h[(i + 1, n - 1)] = cr;
                            h[(i + 1, n)] = ci;
                        }
                    }
                    t = h[(i, n - 1)].abs().max(h[(i, n)].abs());
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            h[(j, n - 1)] /= t;
                            h[(j, n)] /= t;
                        }
                    }
                }
            }
        }
    }

    // back transformation
    for j in (0..nn).rev() {
        for i in 0..=high {
            z = (0..=j.min(high)).map(|k| v[(i, k)] * h[(k, j)]).sum();
            v[(i, j)] = z;
        }
    }
    Ok(())
}

fn normalize(col: &mut [Complex64]) {
    let norm = col.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        for c in col.iter_mut() {
            *c /= norm;
        }
    }
}

fn general(a: &Tensor) -> Result<EigenPairs, LinalgError> {
    let n = a.rows();
    let mut h = Mat {
        n,
        a: a.data().to_vec(),
    };
    let mut v = orthes(&mut h);
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    hqr2(&mut h, &mut v, &mut d, &mut e)?;

    let mut values = vec![Complex64::new(0.0, 0.0); n];
    let mut vectors = CMatrix::zeros(n, n);
    let mut j = 0;
    while j < n {
        if e[j] == 0.0 || j + 1 == n {
            let mut col: Vec<Complex64> = (0..n).map(|i| Complex64::new(v[(i, j)], 0.0)).collect();
            normalize(&mut col);
            values[j] = Complex64::new(d[j], 0.0);
            vectors.set_column(j, &col);
            j += 1;
            continue;
        }
        // columns j, j+1 hold the real and imaginary parts of one vector of
        // the pair; match it to whichever conjugate it satisfies
        let mut col: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(v[(i, j)], v[(i, j + 1)]))
            .collect();
        normalize(&mut col);
        let lam = Complex64::new(d[j], e[j].abs());
        let resid = |l: Complex64| -> f64 {
            (0..n)
                .map(|r| {
                    let av: Complex64 = (0..n).map(|c| col[c] * a.get(r, c)).sum();
                    (av - l * col[r]).norm_sqr()
                })
                .sum()
        };
        let (first, first_vec) = if resid(lam) <= resid(lam.conj()) {
            (lam, col.clone())
        } else {
            (lam.conj(), col.clone())
        };
        let conj_vec: Vec<Complex64> = first_vec.iter().map(|c| c.conj()).collect();
        // keep the positive-imaginary member first
        let (v0, v1) = if first.im > 0.0 {
            (first_vec, conj_vec)
        } else {
            (conj_vec, first_vec)
        };
        values[j] = lam;
        values[j + 1] = lam.conj();
        vectors.set_column(j, &v0);
        vectors.set_column(j + 1, &v1);
        j += 2;
    }
    Ok(EigenPairs {
        values,
        vectors,
        sorted: false,
    })
}

/// Cyclic Jacobi rotations for symmetric input.
fn jacobi(a: &Tensor) -> Result<EigenPairs, LinalgError> {
    let n = a.rows();
    let mut m = Mat {
        n,
        a: a.data().to_vec(),
    };
    let mut v = Mat::identity(n);
    let max_sweeps = SWEEPS_PER_DIM * n;
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps: max_sweeps });
    }
    let values = (0..n).map(|i| Complex64::new(m[(i, i)], 0.0)).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<Complex64> = (0..n).map(|i| Complex64::new(v[(i, j)], 0.0)).collect();
        vectors.set_column(j, &col);
    }
    Ok(EigenPairs {
        values,
        vectors,
        sorted: false,
    })
}
