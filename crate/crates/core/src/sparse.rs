//! Compressed sparse row storage with a shared, immutable sparsity pattern.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Builds a pattern from per-row column sets. Columns are sorted.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            if row.last().is_some_and(|&c| c >= ncols) {
                return Err(Error::invalid("sparsity pattern column out of range"));
            }
            col_idx.extend_from_slice(&row);
            row_ptr.push(col_idx.len());
        }
        Ok(SparsityPattern {
            nrows: row_ptr.len() - 1,
            ncols,
            row_ptr,
            col_idx,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Position of `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.row(i).binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn is_structurally_symmetric(&self) -> bool {
        self.nrows == self.ncols
            && (0..self.nrows).all(|i| self.row(i).iter().all(|&j| self.position(j, i).is_some()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        CsrMatrix { pattern, values }
    }

    pub fn from_parts(pattern: Arc<SparsityPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::invalid("value count does not match pattern"));
        }
        Ok(CsrMatrix { pattern, values })
    }

    /// Sums duplicate entries.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows = vec![BTreeSet::new(); nrows];
        for &(i, j, _) in triplets {
            if i >= nrows || j >= ncols {
                return Err(Error::invalid(format!("triplet ({i}, {j}) out of range")));
            }
            rows[i].insert(j);
        }
        let pattern = SparsityPattern::from_rows(ncols, rows.into_iter().map(|r| r.into_iter().collect()).collect())?;
        let mut m = CsrMatrix::zeros(Arc::new(pattern));
        for &(i, j, v) in triplets {
            let k = m.pattern.position(i, j).expect("entry in pattern");
            m.values[k] += v;
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        CsrMatrix::from_triplets(n, n, &triplets).expect("valid identity")
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn nrows(&self) -> usize {
        self.pattern.nrows
    }

    pub fn ncols(&self) -> usize {
        self.pattern.ncols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn row_values(&self, i: usize) -> &[f64] {
        &self.values[self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1]]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols());
        (0..self.nrows())
            .map(|i| {
                self.pattern
                    .row(i)
                    .iter()
                    .zip(self.row_values(i))
                    .map(|(&j, v)| v * x[j])
                    .sum()
            })
            .collect()
    }

    /// Replaces row `i` by the `i`-th identity row.
    pub fn set_identity_row(&mut self, i: usize) {
        let (a, b) = (self.pattern.row_ptr[i], self.pattern.row_ptr[i + 1]);
        for k in a..b {
            self.values[k] = if self.pattern.col_idx[k] == i { 1.0 } else { 0.0 };
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols()]; self.nrows()];
        for (i, row) in d.iter_mut().enumerate() {
            for (&j, &v) in self.pattern.row(i).iter().zip(self.row_values(i)) {
                row[j] = v;
            }
        }
        d
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 2, 2.0), (1, 0, -1.0)]).unwrap();
        assert_eq!(m.get(0, 2), 3.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.mul_vec(&[1.0, 1.0, 2.0]), vec![6.0, -1.0]);
        assert!(CsrMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn identity_row_replacement() {
        let mut m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 4.0), (0, 1, 2.0), (1, 0, 3.0), (1, 1, 5.0)]).unwrap();
        m.set_identity_row(0);
        assert_eq!(m.to_dense(), vec![vec![1.0, 0.0], vec![3.0, 5.0]]);
        assert!(m.pattern().is_structurally_symmetric());
    }
}
