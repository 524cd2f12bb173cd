//! Compressed sparse column storage for the feature-by-sample matrix.

use nalgebra::DMatrix;

use crate::error::{FilmError, Result};
use crate::scalar::Real;

/// Sparse `rows × cols` matrix stored column by column.
///
/// Row indices inside a column are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix<T> {
    rows: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CscMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, col_ptr: vec![0; cols + 1], row_idx: Vec::new(), values: Vec::new() }
    }

    /// Builds a matrix from per-column `(row, value)` lists. Entries are sorted and
    /// duplicates summed; explicit zeros are dropped.
    pub fn from_columns(rows: usize, columns: Vec<Vec<(usize, T)>>) -> Result<Self> {
        let mut col_ptr = Vec::with_capacity(columns.len() + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for mut col in columns {
            col.sort_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for (r, v) in col {
                if r >= rows {
                    return Err(FilmError::Bounds { index: r, len: rows });
                }
                if last == Some(r) {
                    let slot = values.last_mut().expect("previous entry");
                    *slot += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            // drop entries that summed to zero
            let start = *col_ptr.last().unwrap();
            let mut w = start;
            for k in start..row_idx.len() {
                if values[k] != T::zero() {
                    row_idx[w] = row_idx[k];
                    values[w] = values[k];
                    w += 1;
                }
            }
            row_idx.truncate(w);
            values.truncate(w);
            col_ptr.push(row_idx.len());
        }
        Ok(Self { rows, col_ptr, row_idx, values })
    }

    pub fn from_dense(m: &DMatrix<T>) -> Self {
        let cols = (0..m.ncols())
            .map(|j| {
                (0..m.nrows())
                    .filter(|&i| m[(i, j)] != T::zero())
                    .map(|i| (i, m[(i, j)]))
                    .collect()
            })
            .collect();
        Self::from_columns(m.nrows(), cols).expect("dense indices are in range")
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.col_ptr.len() - 1
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row indices and values of column `j`.
    #[inline]
    pub fn column(&self, j: usize) -> (&[usize], &[T]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.values[a..b])
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (rows, vals) = self.column(j);
        match rows.binary_search(&i) {
            Ok(p) => vals[p],
            Err(_) => T::zero(),
        }
    }

    pub fn column_norm(&self, j: usize) -> T {
        let (_, vals) = self.column(j);
        vals.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn frobenius_norm(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.rows, self.ncols());
        for j in 0..self.ncols() {
            let (rows, vals) = self.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `self · rhs` for dense `rhs` (`cols × k`).
    pub fn mul_dense(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(self.ncols(), rhs.nrows(), "inner dimensions differ");
        let mut out = DMatrix::zeros(self.rows, rhs.ncols());
        for j in 0..self.ncols() {
            let (rows, vals) = self.column(j);
            for c in 0..rhs.ncols() {
                let b = rhs[(j, c)];
                if b == T::zero() {
                    continue;
                }
                let mut col = out.column_mut(c);
                for (&i, &v) in rows.iter().zip(vals) {
                    col[i] += v * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs` for dense `rhs` (`rows × k`).
    pub fn tr_mul_dense(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(self.rows, rhs.nrows(), "inner dimensions differ");
        let mut out = DMatrix::zeros(self.ncols(), rhs.ncols());
        for c in 0..rhs.ncols() {
            let b = rhs.column(c);
            for j in 0..self.ncols() {
                let (rows, vals) = self.column(j);
                let mut acc = T::zero();
                for (&i, &v) in rows.iter().zip(vals) {
                    acc += v * b[i];
                }
                out[(j, c)] = acc;
            }
        }
        out
    }

    /// Dense `lhs · self` for `lhs` of shape `k × rows`.
    pub fn left_mul_dense(&self, lhs: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(lhs.ncols(), self.rows, "inner dimensions differ");
        let mut out = DMatrix::zeros(lhs.nrows(), self.ncols());
        for j in 0..self.ncols() {
            let (rows, vals) = self.column(j);
            let mut col = out.column_mut(j);
            for (&i, &v) in rows.iter().zip(vals) {
                col.axpy(v, &lhs.column(i), T::one());
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> CscMatrix<U> {
        CscMatrix {
            rows: self.rows,
            col_ptr: self.col_ptr.clone(),
            row_idx: self.row_idx.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Sub-matrix keeping the listed columns in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let columns = cols
            .iter()
            .map(|&j| {
                let (r, v) = self.column(j);
                r.iter().copied().zip(v.iter().copied()).collect()
            })
            .collect();
        Self::from_columns(self.rows, columns).expect("rows unchanged")
    }

    /// Row-major transpose index: for each row, the `(column, value)` entries.
    pub fn row_lists(&self) -> Vec<Vec<(usize, T)>> {
        let mut lists = vec![Vec::new(); self.rows];
        for j in 0..self.ncols() {
            let (rows, vals) = self.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                lists[i].push((j, v));
            }
        }
        lists
    }
}
