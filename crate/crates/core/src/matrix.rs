//! Dense row-major `f64` matrix, the numeric carrier for every stage of the
//! pipeline (raw features, embeddings, codes, posteriors, gradients).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} entries", rows * cols),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows. An empty slice yields a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices get an explicit path.
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn expect_shape(&self, context: &'static str, rows: usize, cols: usize) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(Error::shape(
                context,
                format!("{rows}x{cols}"),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} rows on the right", self.cols),
                other.rows,
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul", format!("{} rows", self.rows), other.rows));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", format!("{} columns", self.cols), other.cols));
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "zip_map",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "add_assign",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::shape("add_row_vector", self.cols, v.len()));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(idx.len(), self.cols, data)
    }

    pub fn select_columns(&self, idx: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = idx.iter().find(|&&c| c >= self.cols) {
            return Err(Error::shape("select_columns", format!("< {}", self.cols), bad));
        }
        let mut data = Vec::with_capacity(idx.len() * self.rows);
        for row in self.iter_rows() {
            data.extend(idx.iter().map(|&c| row[c]));
        }
        Ok(Matrix::from_raw(self.rows, idx.len(), data))
    }

    /// Columns `[start, start + width)`.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Matrix> {
        let idx: Vec<usize> = (start..start + width).collect();
        self.select_columns(&idx)
    }

    /// Horizontal concatenation, left to right in slice order.
    pub fn hconcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = match blocks.first() {
            Some(b) => b.rows,
            None => return Ok(Matrix::zeros(0, 0)),
        };
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::shape("hconcat", format!("{rows} rows"), b.rows));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Vertical concatenation, top to bottom in slice order.
    pub fn vconcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = match blocks.iter().find(|b| b.rows > 0) {
            Some(b) => b.cols,
            None => return Ok(Matrix::zeros(0, blocks.first().map_or(0, |b| b.cols))),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks.iter().filter(|b| b.rows > 0) {
            if b.cols != cols {
                return Err(Error::shape("vconcat", format!("{cols} columns"), b.cols));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Index of the largest entry per row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on differently shaped matrices");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
