//! Dense row-major matrices, per-row statistics vectors, and the handful of
//! exact linear-algebra primitives the kernels are built from.
//!
//! All storage is 64-bit. Elements are finite reals except for
//! `f64::NEG_INFINITY`, which is reserved as the masked-logit sentinel.
//! [`matmul`] accumulates every output element over the inner index in
//! ascending order, so its results are bitwise reproducible and equal to a
//! naive three-loop product regardless of the loop blocking used here.

use crate::error::{Error, Result};
use crate::instrument::CostCounters;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Dimension("ragged row lengths".into()));
        }
        Ok(Matrix {
            rows: n_rows,
            cols: n_cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot compare {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn check_window(&self, r0: usize, n_rows: usize, c0: usize, n_cols: usize) -> Result<()> {
        if r0 + n_rows > self.rows || c0 + n_cols > self.cols {
            return Err(Error::Index(format!(
                "window rows {r0}..{} cols {c0}..{} exceeds {}x{}",
                r0 + n_rows,
                c0 + n_cols,
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    /// Copies a rectangular window out into a fresh matrix. This is the
    /// load primitive for moving a block into block-local storage.
    pub fn block(&self, r0: usize, n_rows: usize, c0: usize, n_cols: usize) -> Result<Matrix> {
        self.check_window(r0, n_rows, c0, n_cols)?;
        let mut out = Matrix::zeros(n_rows, n_cols);
        for r in 0..n_rows {
            let src = &self.row(r0 + r)[c0..c0 + n_cols];
            out.row_mut(r).copy_from_slice(src);
        }
        Ok(out)
    }

    /// Read-only window that aliases this matrix's storage.
    pub fn view(&self, r0: usize, n_rows: usize, c0: usize, n_cols: usize) -> Result<MatrixView<'_>> {
        self.check_window(r0, n_rows, c0, n_cols)?;
        Ok(MatrixView {
            parent: self,
            r0,
            c0,
            rows: n_rows,
            cols: n_cols,
        })
    }

    /// Mutable window that aliases this matrix's storage; writes through a
    /// view land directly in the parent.
    pub fn view_mut(
        &mut self,
        r0: usize,
        n_rows: usize,
        c0: usize,
        n_cols: usize,
    ) -> Result<MatrixViewMut<'_>> {
        self.check_window(r0, n_rows, c0, n_cols)?;
        Ok(MatrixViewMut {
            parent: self,
            r0,
            c0,
            rows: n_rows,
            cols: n_cols,
        })
    }
}

/// Borrowed rectangular window of a [`Matrix`].
pub struct MatrixView<'a> {
    parent: &'a Matrix,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
}

impl MatrixView<'_> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "view index out of range");
        self.parent.get(self.r0 + r, self.c0 + c)
    }

    pub fn to_matrix(&self) -> Matrix {
        self.parent
            .block(self.r0, self.rows, self.c0, self.cols)
            .expect("view window was validated at construction")
    }
}

/// Mutable rectangular window of a [`Matrix`].
pub struct MatrixViewMut<'a> {
    parent: &'a mut Matrix,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
}

impl MatrixViewMut<'_> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "view index out of range");
        self.parent.get(self.r0 + r, self.c0 + c)
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.rows && c < self.cols, "view index out of range");
        self.parent.set(self.r0 + r, self.c0 + c, v);
    }

    /// Overwrites the window with `src`.
    pub fn copy_from(&mut self, src: &Matrix) -> Result<()> {
        if src.rows() != self.rows || src.cols() != self.cols {
            return Err(Error::Dimension(format!(
                "cannot copy {}x{} into {}x{} view",
                src.rows(),
                src.cols(),
                self.rows,
                self.cols
            )));
        }
        for r in 0..self.rows {
            let dst_row = self.parent.row_mut(self.r0 + r);
            dst_row[self.c0..self.c0 + self.cols].copy_from_slice(src.row(r));
        }
        Ok(())
    }

    /// Adds `src` into the window elementwise, one add per element in row
    /// order.
    pub fn add_assign_from(&mut self, src: &Matrix) -> Result<()> {
        if src.rows() != self.rows || src.cols() != self.cols {
            return Err(Error::Dimension(format!(
                "cannot accumulate {}x{} into {}x{} view",
                src.rows(),
                src.cols(),
                self.rows,
                self.cols
            )));
        }
        for r in 0..self.rows {
            let dst_row = &mut self.parent.row_mut(self.r0 + r)[self.c0..self.c0 + self.cols];
            for (d, s) in dst_row.iter_mut().zip(src.row(r)) {
                *d += s;
            }
        }
        Ok(())
    }
}

/// One scalar per matrix row: running maxima, normalizers, logsumexp values.
#[derive(Debug, Clone, PartialEq)]
pub struct RowVector {
    data: Vec<f64>,
}

impl RowVector {
    pub fn zeros(len: usize) -> Self {
        RowVector {
            data: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, value: f64) -> Self {
        RowVector {
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        RowVector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<RowVector> {
        if start + len > self.data.len() {
            return Err(Error::Index(format!(
                "slice {start}..{} exceeds length {}",
                start + len,
                self.data.len()
            )));
        }
        Ok(RowVector {
            data: self.data[start..start + len].to_vec(),
        })
    }

    pub fn max_abs_diff(&self, other: &RowVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "cannot compare lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Per-row maximum. Masked sentinels participate: a row of `-inf` yields
/// `-inf`.
pub fn rowmax(m: &Matrix) -> Result<RowVector> {
    if m.is_empty() {
        return Err(Error::Dimension("rowmax of an empty matrix".into()));
    }
    let mut out = RowVector::zeros(m.rows());
    for r in 0..m.rows() {
        let mx = m.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.set(r, mx);
    }
    Ok(out)
}

/// Per-row sum, accumulated left to right.
pub fn rowsum(m: &Matrix) -> Result<RowVector> {
    if m.is_empty() {
        return Err(Error::Dimension("rowsum of an empty matrix".into()));
    }
    let mut out = RowVector::zeros(m.rows());
    for r in 0..m.rows() {
        out.set(r, m.row(r).iter().sum());
    }
    Ok(out)
}

/// Matrix product `A * B` (or `A * B^T` when `transpose_b`), counting
/// `2*m*n*k` matmul FLOPs.
///
/// Both paths add into each output element strictly in ascending inner
/// index, so the result is bitwise equal to the classic three-nested-loop
/// product.
pub fn matmul(
    a: &Matrix,
    b: &Matrix,
    transpose_b: bool,
    counters: &mut CostCounters,
) -> Result<Matrix> {
    let (b_inner, b_outer) = if transpose_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if a.cols() != b_inner {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {}x{} vs {}x{}{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            if transpose_b { " (transposed)" } else { "" }
        )));
    }
    let (m, n, k) = (a.rows(), b_outer, a.cols());
    counters.matmul_flops += 2 * m as u64 * n as u64 * k as u64;

    let mut out = Matrix::zeros(m, n);
    if transpose_b {
        for i in 0..m {
            let a_row = a.row(i);
            let out_row = out.row_mut(i);
            for (j, out_v) in out_row.iter_mut().enumerate() {
                let b_row = b.row(j);
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a_row[t] * b_row[t];
                }
                *out_v = acc;
            }
        }
    } else {
        for i in 0..m {
            // Ascending t with a row-axpy keeps per-element add order
            // identical to the scalar triple loop while streaming B rows.
            for t in 0..k {
                let a_it = a.get(i, t);
                let b_row = b.row(t);
                let out_row = out.row_mut(i);
                for j in 0..n {
                    out_row[j] += a_it * b_row[j];
                }
            }
        }
    }
    Ok(out)
}

/// `A^T * B`, used for gradient products that contract over rows.
/// Same exact-ordering guarantee as [`matmul`].
pub(crate) fn matmul_at(a: &Matrix, b: &Matrix, counters: &mut CostCounters) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "matmul_at contraction dimensions disagree: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, n, k) = (a.cols(), b.cols(), a.rows());
    counters.matmul_flops += 2 * m as u64 * n as u64 * k as u64;

    let mut out = Matrix::zeros(m, n);
    for t in 0..k {
        let a_row = a.row(t);
        let b_row = b.row(t);
        for (i, &a_ti) in a_row.iter().enumerate() {
            let out_row = out.row_mut(i);
            for j in 0..n {
                out_row[j] += a_ti * b_row[j];
            }
        }
    }
    Ok(out)
}
