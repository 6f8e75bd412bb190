use ndarray::Array2;

/// Compressed sparse row matrix of constants.
///
/// Used for neighbour aggregation, parent gathers and the hierarchy
/// product, where the operand structure is fixed and only the dense
/// right-hand side carries gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Build from (row, col, value) triplets. Duplicates are summed;
    /// entries within a row are sorted by column.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense(a: &Array2<f64>) -> Self {
        let mut t = Vec::new();
        for ((r, c), &v) in a.indexed_iter() {
            if v != 0.0 {
                t.push((r, c, v));
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), t)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                a[(r, c)] += v;
            }
        }
        a
    }

    /// `self × x` where `x` is row-major `[cols × width]`.
    pub fn matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let src = &x[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// `selfᵀ × g` where `g` is row-major `[rows × width]`.
    pub fn transpose_matmul_dense(&self, g: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * width];
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// Block-diagonal stack of `copies` replicas of `self`.
    pub fn block_diagonal(&self, copies: usize) -> Csr {
        let mut t = Vec::with_capacity(self.nnz() * copies);
        for b in 0..copies {
            for r in 0..self.rows {
                for (c, v) in self.row(r) {
                    t.push((b * self.rows + r, b * self.cols + c, v));
                }
            }
        }
        Csr::from_triplets(self.rows * copies, self.cols * copies, t)
    }
}
