use std::fmt;

use super::NdError;

/// Dense row-major array of `f64`.
///
/// Rank is arbitrary for storage, but every arithmetic kernel works on rank-2
/// views (`[rows, cols]`); a rank-1 tensor of length `n` behaves as `[1, n]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Below this many multiply-adds a matmul stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MATMUL_WORK: usize = 1 << 18;

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, NdError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NdError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Builds a `[rows.len(), N]` matrix from fixed-width rows.
    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        Self {
            shape: vec![rows.len(), N],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of the rank-2 view.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing extent of the rank-2 view (product of all but the first dim).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, NdError> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NdError::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the first non-finite entry as an error.
    pub fn check_finite(&self, what: &str) -> Result<(), NdError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(NdError::NonFinite {
                what: what.to_string(),
                index,
                value: self.data[index],
            }),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(f64, f64) -> f64) -> Self {
        self.assert_same_shape(other, op);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn assert_same_shape(&self, other: &Self, op: &str) {
        if self.shape != other.shape {
            panic!(
                "{}",
                NdError::ShapeMismatch {
                    op: op.to_string(),
                    left: self.shape.clone(),
                    right: other.shape.clone(),
                }
            );
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.assert_same_shape(other, "add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) {
        self.assert_same_shape(other, "axpy");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Adds a `[1, cols]` (or `[cols]`) row to every row.
    pub fn add_row(&self, bias: &Self) -> Self {
        let cols = self.cols();
        if bias.len() != cols {
            panic!(
                "{}",
                NdError::ShapeMismatch {
                    op: "add_row".into(),
                    left: self.shape.clone(),
                    right: bias.shape.clone(),
                }
            );
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(cols) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        out
    }

    /// Column sums as a `[1, cols]` tensor.
    pub fn sum_rows(&self) -> Self {
        let cols = self.cols();
        let mut out = vec![0.0; cols];
        for row in self.data.chunks_exact(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self {
            shape: vec![1, cols],
            data: out,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Induced 1-norm (maximum absolute column sum) of the rank-2 view.
    pub fn norm1(&self) -> f64 {
        let cols = self.cols();
        let mut sums = vec![0.0; cols];
        for row in self.data.chunks_exact(cols) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v.abs();
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    fn check_inner(&self, other: &Self, op: &str, ok: bool) {
        if !ok {
            panic!(
                "{}",
                NdError::ShapeMismatch {
                    op: op.to_string(),
                    left: self.shape.clone(),
                    right: other.shape.clone(),
                }
            );
        }
    }

    /// `self · other` for `[m,k]·[k,n]`.
    pub fn matmul(&self, other: &Self) -> Self {
        let (m, k) = (self.rows(), self.cols());
        let n = other.cols();
        self.check_inner(other, "matmul", other.rows() == k);
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let kernel = |i: usize, out_row: &mut [f64]| {
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &aip) in a_row.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        };
        run_rows(&mut out, n, m * k * n, kernel);
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// `self · otherᵀ` for `[m,k]·[n,k]ᵀ`.
    pub fn matmul_bt(&self, other: &Self) -> Self {
        let (m, k) = (self.rows(), self.cols());
        let n = other.rows();
        self.check_inner(other, "matmul_bt", other.cols() == k);
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let kernel = |i: usize, out_row: &mut [f64]| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        };
        run_rows(&mut out, n, m * k * n, kernel);
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// `selfᵀ · other` for `[k,m]ᵀ·[k,n]`.
    pub fn matmul_at(&self, other: &Self) -> Self {
        let (k, m) = (self.rows(), self.cols());
        let n = other.cols();
        self.check_inner(other, "matmul_at", other.rows() == k);
        let mut out = vec![0.0; m * n];
        // Accumulate rank-1 updates in a fixed order so the result does not
        // depend on thread count.
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Horizontal concatenation of rank-2 blocks with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Self {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        for p in parts {
            if p.rows() != rows {
                panic!(
                    "{}",
                    NdError::ShapeMismatch {
                        op: "concat_cols".into(),
                        left: parts[0].shape.clone(),
                        right: p.shape.clone(),
                    }
                );
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Self {
            shape: vec![rows, total],
            data,
        }
    }

    /// Columns `start..end` of the rank-2 view.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let cols = self.cols();
        assert!(
            start <= end && end <= cols,
            "slice_cols {start}..{end} out of range for {:?}",
            self.shape
        );
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            shape: vec![rows, end - start],
            data,
        }
    }

    /// Rows `start..end` as a new tensor, keeping trailing dims.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let cols = self.cols();
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * cols..end * cols].to_vec(),
        }
    }

    /// Gathers rows by index, keeping trailing dims.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let cols = self.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }
}

#[cfg(feature = "parallel")]
fn run_rows<F>(out: &mut [f64], n: usize, work: usize, kernel: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if n == 0 {
        return;
    }
    if work >= PAR_MATMUL_WORK && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| kernel(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            kernel(i, row);
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn run_rows<F>(out: &mut [f64], n: usize, _work: usize, kernel: F)
where
    F: Fn(usize, &mut [f64]),
{
    if n == 0 {
        return;
    }
    for (i, row) in out.chunks_mut(n).enumerate() {
        kernel(i, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = Tensor::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.25);
        let ab = a.matmul(&b);
        assert_eq!(ab, a.matmul_bt(&b.transpose()));
        assert_eq!(ab, a.transpose().matmul_at(&b));
        assert_eq!(ab.get(0, 0), (0..4).map(|p| a.get(0, p) * b.get(p, 0)).sum::<f64>());
    }

    #[test]
    fn concat_then_slice() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::from_rows(&[[5.0], [6.0]]);
        let c = Tensor::concat_cols(&[&a, &b]);
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.slice_cols(2, 3), b);
        assert_eq!(c.slice_cols(0, 2), a);
    }

    #[test]
    fn norm1_is_max_column_sum() {
        let a = Tensor::from_rows(&[[1.0, -7.0], [-2.0, 3.0]]);
        assert_eq!(a.norm1(), 10.0);
    }

    #[test]
    fn check_finite_reports_index() {
        let t = Tensor::new([3], vec![1.0, f64::NAN, 2.0]).unwrap();
        match t.check_finite("x") {
            Err(NdError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_panics_on_mismatch() {
        let _ = Tensor::zeros([2, 2]).add(&Tensor::zeros([2, 3]));
    }
}
