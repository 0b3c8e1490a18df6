use serde::{Deserialize, Serialize};

/// Compressed sparse row matrix with `f64` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from per-row `(column, weight)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in &rows {
            for &(c, w) in row {
                assert!(c < cols, "column {c} out of range {cols}");
                indices.push(c);
                values.push(w);
            }
            indptr.push(indices.len());
        }
        Csr {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `out += self * x` with `x` of width `width`.
    pub(crate) fn spmm_into(&self, x: &[f64], width: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let out_row = &mut out[r * width..(r + 1) * width];
            for (c, w) in self.row(r) {
                let x_row = &x[c * width..(c + 1) * width];
                for (o, &v) in out_row.iter_mut().zip(x_row) {
                    *o += w * v;
                }
            }
        }
    }

    /// `out += self^T * dy`.
    pub(crate) fn spmm_t_into(&self, dy: &[f64], width: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let dy_row = &dy[r * width..(r + 1) * width];
            for (c, w) in self.row(r) {
                let out_row = &mut out[c * width..(c + 1) * width];
                for (o, &g) in out_row.iter_mut().zip(dy_row) {
                    *o += w * g;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, w) in self.row(r) {
                row[c] += w;
            }
        }
        d
    }
}
