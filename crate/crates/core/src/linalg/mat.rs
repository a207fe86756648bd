//! Row-major dense matrices and the forward kernels used throughout the crate.

use std::fmt;

use super::ShapeError;

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::new(
                "from_vec",
                (rows, cols),
                (data.len(), 1),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Mat {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_dot(&self, other: &Mat) -> Result<f64, ShapeError> {
        self.same_shape("inner", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    fn same_shape(&self, op: &'static str, other: &Mat) -> Result<(), ShapeError> {
        if self.shape() != other.shape() {
            return Err(ShapeError::new(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat, ShapeError> {
        if self.cols != other.rows {
            return Err(ShapeError::new("matmul", self.shape(), other.shape()));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            &other.data,
            &mut out.data,
            false,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        transpose_into(self.rows, self.cols, &self.data, &mut out.data);
        out
    }

    /// `EᵀE`.
    pub fn gram(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.cols);
        gram_into(self.rows, self.cols, &self.data, &mut out.data);
        out
    }

    /// Multiplies column `k` of `self` by `mu[k]`.
    pub fn hadamard_colscale(&self, mu: &[f64]) -> Result<Mat, ShapeError> {
        if mu.len() != self.cols {
            return Err(ShapeError::new(
                "hadamard_colscale",
                (1, mu.len()),
                self.shape(),
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols) {
            for (v, s) in row.iter_mut().zip(mu) {
                *v *= s;
            }
        }
        Ok(out)
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat, ShapeError> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn add(&self, other: &Mat) -> Result<Mat, ShapeError> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat, ShapeError> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Mat {
        self.map(|v| v * alpha)
    }

    pub fn relu(&self) -> Mat {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Mat {
        self.map(sigmoid)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Mat,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Mat, ShapeError> {
        self.same_shape(op, other)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn concat_cols(&self, other: &Mat) -> Result<Mat, ShapeError> {
        if self.rows != other.rows {
            return Err(ShapeError::new("concat", self.shape(), other.shape()));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Mat {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Row-major flattening into a `1 × rows·cols` row vector.
    pub fn vec_flatten(&self) -> Mat {
        Mat {
            rows: 1,
            cols: self.data.len(),
            data: self.data.clone(),
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.data[i * self.cols + i])
            .collect()
    }

    pub fn set_diag(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self.data[i * self.cols + i] = value;
        }
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `aᵀ Φ b` for column vectors `a`, `b` of length `k` and a `k × k` matrix.
pub fn bilinear(a: &[f64], phi: &Mat, b: &[f64]) -> Result<f64, ShapeError> {
    if phi.rows != a.len() || phi.cols != b.len() {
        return Err(ShapeError::new("bilinear", (a.len(), b.len()), phi.shape()));
    }
    Ok(bilinear_raw(a, &phi.data, b))
}

#[inline]
pub(crate) fn bilinear_raw(a: &[f64], phi: &[f64], b: &[f64]) -> f64 {
    let k = b.len();
    let mut acc = 0.0;
    for (r, &ar) in a.iter().enumerate() {
        let row = &phi[r * k..(r + 1) * k];
        let mut dot = 0.0;
        for (p, bv) in row.iter().zip(b) {
            dot += p * bv;
        }
        acc += ar * dot;
    }
    acc
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inner-product size above which the blocked kernel is used. The choice
/// depends only on the inner and output widths, never on the row count, so
/// each output row is computed identically however many rows a call carries.
const BLOCKED_THRESHOLD: usize = 2048;

/// `C (+)= A·B` for row-major `A: m×k`, `B: k×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k * n >= BLOCKED_THRESHOLD {
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the slices are sized m×k, k×n and m×n (checked above) and
        // the strides describe dense row-major layouts within them.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    if !accumulate {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

pub(crate) fn transpose_into(rows: usize, cols: usize, src: &[f64], dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub(crate) fn gram_into(rows: usize, cols: usize, e: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..rows {
        let row = &e[r * cols..(r + 1) * cols];
        for i in 0..cols {
            let ei = row[i];
            for j in 0..cols {
                out[i * cols + j] += ei * row[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colscale_scales_columns() {
        let m = Mat::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let out = m.hadamard_colscale(&[2.0, 3.0]).unwrap();
        assert_eq!(out, Mat::from_rows(&[&[2.0, 3.0], &[2.0, 3.0]]));
    }

    #[test]
    fn bilinear_scalar_case() {
        let phi = Mat::from_rows(&[&[2.0]]);
        assert_eq!(bilinear(&[3.0], &phi, &[4.0]).unwrap(), 24.0);
    }

    #[test]
    fn gram_of_row() {
        let e = Mat::from_rows(&[&[1.0, 2.0]]);
        assert_eq!(e.gram(), Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(a.add(&Mat::zeros(3, 2)).is_err());
        assert!(a.hadamard_colscale(&[1.0]).is_err());
        assert!(a.concat_cols(&Mat::zeros(1, 1)).is_err());
    }

    #[test]
    fn blocked_and_naive_kernels_agree() {
        let k = 64;
        let n = 64;
        let a: Vec<f64> = (0..3 * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut blocked = vec![0.0; 3 * n];
        gemm(3, k, n, &a, &b, &mut blocked, false);
        let mut naive = vec![0.0; 3 * n];
        for i in 0..3 {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        for (x, y) in blocked.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_rows_do_not_depend_on_row_count() {
        let k = 40;
        let n = 100;
        let rows = 37;
        let a: Vec<f64> = (0..rows * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut all = vec![0.0; rows * n];
        gemm(rows, k, n, &a, &b, &mut all, false);
        for r in 0..rows {
            let mut one = vec![0.0; n];
            gemm(1, k, n, &a[r * k..(r + 1) * k], &b, &mut one, false);
            assert_eq!(&all[r * n..(r + 1) * n], &one[..]);
        }
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
