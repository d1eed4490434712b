//! Compressed sparse row storage used by the optimization problems.

use nalgebra::{DMatrix, DVector};

/// Row-compressed sparse matrix. Duplicate triplets are summed on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    /// Rows holding at least one entry; keeps stage-local matrices cheap.
    active: Vec<usize>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
            active: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &triplets)
    }

    /// Builds from `(row, col, value)` triplets; entries outside the shape panic.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        let active = (0..nrows).filter(|&r| row_ptr[r + 1] > 0).collect();
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
            active,
        }
    }

    /// Builds from a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &triplets)
    }

    /// Stacks the rows of `blocks` vertically. All blocks must share a column count.
    pub fn vstack(blocks: &[&SparseMatrix]) -> Self {
        let ncols = blocks.first().map_or(0, |b| b.ncols);
        let mut triplets = Vec::new();
        let mut offset = 0;
        for b in blocks {
            assert_eq!(b.ncols, ncols, "vstack column mismatch");
            triplets.extend(b.iter().map(|(r, c, v)| (offset + r, c, v)));
            offset += b.nrows;
        }
        Self::from_triplets(offset, ncols, &triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn row_values(&self, r: usize) -> &[f64] {
        &self.values[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Iterates all stored `(row, col, value)` entries in row order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.active
            .iter()
            .flat_map(move |&r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn row_dot(&self, r: usize, x: &DVector<f64>) -> f64 {
        self.row(r).map(|(c, v)| v * x[c]).sum()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows);
        self.mul_vec_add(x, 1.0, &mut out);
        out
    }

    /// `out += alpha · self · x`, touching only nonempty rows.
    pub fn mul_vec_add(&self, x: &DVector<f64>, alpha: f64, out: &mut DVector<f64>) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(out.len(), self.nrows);
        for &r in &self.active {
            out[r] += alpha * self.row_dot(r, x);
        }
    }

    /// Computes `selfᵀ x`.
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for &r in &self.active {
            let xr = x[r];
            if xr != 0.0 {
                for (c, v) in self.row(r) {
                    out[c] += v * xr;
                }
            }
        }
        out
    }

    /// `xᵀ self x` for a square matrix.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        self.active.iter().map(|&r| x[r] * self.row_dot(r, x)).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scale_row(&mut self, r: usize, factor: f64) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.values[span].iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn row_max_abs(&self, r: usize) -> f64 {
        self.row_values(r).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let t = self.transpose();
        self.iter().all(|(r, c, v)| (t.get(r, c) - v).abs() <= tol * (1.0 + v.abs()))
            && t.iter().all(|(r, c, v)| (self.get(r, c) - v).abs() <= tol * (1.0 + v.abs()))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let cols = self.row_cols(r);
        match cols.binary_search(&c) {
            Ok(k) => self.values[self.row_ptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> Self {
        let triplets: Vec<_> = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &triplets)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            m[(r, c)] += v;
        }
        m
    }

    /// Sorted list of indices touched by any stored entry (rows or columns).
    pub fn support(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.iter().flat_map(|(r, c, _)| [r, c]).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.5), (1, 0, -1.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.5);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn products_match_dense() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -2.0, 3.0, 0.0, 4.0]);
        let s = SparseMatrix::from_dense(&d);
        let x = DVector::from_vec(vec![0.5, -1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mul_vec(&x), &d * &x);
        assert_eq!(s.tr_mul_vec(&y), d.transpose() * &y);
        assert_eq!(s.to_dense(), d);
    }

    #[test]
    fn vstack_and_support() {
        let a = SparseMatrix::from_triplets(1, 4, &[(0, 3, 1.0)]);
        let b = SparseMatrix::from_triplets(2, 4, &[(1, 1, 2.0)]);
        let s = SparseMatrix::vstack(&[&a, &b]);
        assert_eq!(s.nrows(), 3);
        assert_eq!(s.get(2, 1), 2.0);
        assert_eq!(s.support(), vec![0, 1, 2, 3]);
    }
}
