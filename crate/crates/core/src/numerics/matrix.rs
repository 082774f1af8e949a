use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};

/// Counts element writes into weight memory.
///
/// Only operations that mutate a weight (or an adapter factor) in place
/// report here. Scratch buffers built at scoring time never do.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteCounter {
    pub writes: u64,
}

impl WriteCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn record(&mut self, elements: usize) {
        self.writes += elements as u64;
    }
}

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ZoError::dim(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(ZoError::input("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies columns `[offset, offset + width)` into a new matrix.
    pub fn column_block(&self, offset: usize, width: usize) -> Result<Self> {
        if offset + width > self.cols {
            return Err(ZoError::dim(format!(
                "column block [{offset}, {}) exceeds {} columns",
                offset + width,
                self.cols
            )));
        }
        let mut out = Self::zeros(self.rows, width);
        for i in 0..self.rows {
            out.data[i * width..(i + 1) * width].copy_from_slice(
                &self.data[i * self.cols + offset..i * self.cols + offset + width],
            );
        }
        Ok(out)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(rows: usize, parts: &[&DenseMatrix]) -> Result<Self> {
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(ZoError::dim(format!(
                    "cannot concatenate {}-row block into {rows} rows",
                    p.rows
                )));
            }
            for i in 0..rows {
                out.data[i * cols + offset..i * cols + offset + p.cols].copy_from_slice(p.row(i));
            }
            offset += p.cols;
        }
        Ok(out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(ZoError::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `U Vᵀ` for `U: m×r`, `V: n×r`, accumulated over `k` ascending.
    pub fn outer_product(u: &Self, v: &Self) -> Result<Self> {
        check_factors(u, v)?;
        let mut out = Self::zeros(u.rows, v.rows);
        for i in 0..u.rows {
            let urow = u.row(i);
            for j in 0..v.rows {
                out.data[i * v.rows + j] = canonical_dot(urow, v.row(j));
            }
        }
        Ok(out)
    }

    /// `W ← W + alpha · U Vᵀ` in canonical order. Records `m·n` writes.
    pub fn axpy_outer(
        &mut self,
        alpha: f64,
        u: &Self,
        v: &Self,
        counter: &mut WriteCounter,
    ) -> Result<()> {
        self.axpy_outer_block(0, alpha, u, v, counter)
    }

    /// [`axpy_outer`](Self::axpy_outer) restricted to the column block that
    /// starts at `col_offset` and is `v.rows()` wide.
    pub fn axpy_outer_block(
        &mut self,
        col_offset: usize,
        alpha: f64,
        u: &Self,
        v: &Self,
        counter: &mut WriteCounter,
    ) -> Result<()> {
        check_factors(u, v)?;
        self.check_block(col_offset, u.rows, v.rows)?;
        add_scaled_product_unchecked(self, col_offset, alpha, u, v);
        counter.record(u.rows * v.rows);
        Ok(())
    }

    /// `W[:, off..off+n] ← W[:, off..off+n] + alpha · P`. Records `m·n` writes.
    pub fn add_scaled_block(
        &mut self,
        col_offset: usize,
        alpha: f64,
        p: &Self,
        counter: &mut WriteCounter,
    ) -> Result<()> {
        self.check_block(col_offset, p.rows, p.cols)?;
        for i in 0..p.rows {
            let dst =
                &mut self.data[i * self.cols + col_offset..i * self.cols + col_offset + p.cols];
            for (w, x) in dst.iter_mut().zip(p.row(i)) {
                *w += alpha * x;
            }
        }
        counter.record(p.rows * p.cols);
        Ok(())
    }

    /// Emulated single precision copy.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&x| x as f32).collect()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ZoError::dim(format!(
                "shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_block(&self, col_offset: usize, rows: usize, cols: usize) -> Result<()> {
        if rows != self.rows || col_offset + cols > self.cols {
            return Err(ZoError::dim(format!(
                "{rows}x{cols} block at column {col_offset} does not fit a {}x{} matrix",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_factors(u: &DenseMatrix, v: &DenseMatrix) -> Result<()> {
    if u.cols != v.cols {
        return Err(ZoError::dim(format!(
            "factor ranks differ: U is {}x{}, V is {}x{}",
            u.rows, u.cols, v.rows, v.cols
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn canonical_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Shared kernel for every `W += alpha · A Bᵀ` in the crate. For each
/// `(i, j)` the inner sum runs over `k` ascending and is scaled once.
pub(crate) fn add_scaled_product_unchecked(
    w: &mut DenseMatrix,
    col_offset: usize,
    alpha: f64,
    a: &DenseMatrix,
    b: &DenseMatrix,
) {
    let wc = w.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let s = canonical_dot(arow, b.row(j));
            w.data[i * wc + col_offset + j] += alpha * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_axpy(w: &DenseMatrix, alpha: f64, u: &DenseMatrix, v: &DenseMatrix) -> DenseMatrix {
        let mut out = w.clone();
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let mut s = 0.0;
                for k in 0..u.cols() {
                    s += u.get(i, k) * v.get(j, k);
                }
                out.set(i, j, w.get(i, j) + alpha * s);
            }
        }
        out
    }

    #[test]
    fn axpy_zero_alpha_is_identity() {
        let mut w = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let before = w.clone();
        let u = DenseMatrix::from_rows(&[&[5.0], &[6.0]]);
        let v = DenseMatrix::from_rows(&[&[7.0], &[8.0]]);
        let mut c = WriteCounter::new();
        w.axpy_outer(0.0, &u, &v, &mut c).unwrap();
        assert_eq!(w, before);
        assert_eq!(c.writes, 4);
    }

    #[test]
    fn axpy_unit_outer_product() {
        let mut w = DenseMatrix::zeros(2, 2);
        let u = DenseMatrix::from_rows(&[&[1.0], &[0.0]]);
        let v = DenseMatrix::from_rows(&[&[0.0], &[1.0]]);
        w.axpy_outer(1.0, &u, &v, &mut WriteCounter::new()).unwrap();
        assert_eq!(w, DenseMatrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]));
    }

    #[test]
    fn axpy_matches_triple_loop_exactly() {
        let w = DenseMatrix::from_rows(&[
            &[0.3, -1.2, 2.5],
            &[1.1, 0.7, -0.4],
            &[-2.2, 0.05, 0.9],
            &[0.0, 3.3, -1.7],
        ]);
        let u = DenseMatrix::from_rows(&[&[0.1, 1.7], &[-0.8, 0.25], &[1.3, -0.6], &[0.45, 2.1]]);
        let v = DenseMatrix::from_rows(&[&[-1.4, 0.33], &[0.9, -0.71], &[0.12, 1.05]]);
        let expected = naive_axpy(&w, -0.37, &u, &v);
        let mut got = w.clone();
        got.axpy_outer(-0.37, &u, &v, &mut WriteCounter::new())
            .unwrap();
        assert_eq!(got.max_abs_diff(&expected).unwrap(), 0.0);
    }

    #[test]
    fn axpy_rejects_shape_mismatch() {
        let mut w = DenseMatrix::zeros(3, 3);
        let u = DenseMatrix::zeros(2, 1);
        let v = DenseMatrix::zeros(3, 1);
        assert!(matches!(
            w.axpy_outer(1.0, &u, &v, &mut WriteCounter::new()),
            Err(ZoError::Dimension(_))
        ));
        let v2 = DenseMatrix::zeros(3, 2);
        let u2 = DenseMatrix::zeros(3, 1);
        assert!(w
            .axpy_outer(1.0, &u2, &v2, &mut WriteCounter::new())
            .is_err());
    }

    #[test]
    fn cached_product_path_is_bitwise_equal_to_axpy() {
        let u = DenseMatrix::from_rows(&[&[0.31, -1.7], &[2.2, 0.013]]);
        let v = DenseMatrix::from_rows(&[&[1.9, 0.4], &[-0.27, 3.1]]);
        let w = DenseMatrix::from_rows(&[&[0.5, 0.25], &[-0.125, 1.0]]);
        let p = DenseMatrix::outer_product(&u, &v).unwrap();
        let mut a = w.clone();
        let mut b = w.clone();
        a.axpy_outer(1e-3, &u, &v, &mut WriteCounter::new())
            .unwrap();
        b.add_scaled_block(0, 1e-3, &p, &mut WriteCounter::new())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block_update_touches_only_block() {
        let mut w = DenseMatrix::zeros(2, 6);
        let u = DenseMatrix::from_rows(&[&[1.0], &[2.0]]);
        let v = DenseMatrix::from_rows(&[&[1.0], &[1.0]]);
        let mut c = WriteCounter::new();
        w.axpy_outer_block(2, 1.0, &u, &v, &mut c).unwrap();
        assert_eq!(c.writes, 4);
        assert_eq!(w.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(w.row(1), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        assert!(w.axpy_outer_block(5, 1.0, &u, &v, &mut c).is_err());
    }

    #[test]
    fn from_vec_validates() {
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }
}
