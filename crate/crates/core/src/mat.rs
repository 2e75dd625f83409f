//! Dense row-major `f64` matrices sized for desk-scale training.

/// Row-major dense matrix. Everything downstream (embeddings, prototypes,
/// tower weights, similarity matrices) is one of these.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self = self * a + other * b`, elementwise over identically shaped matrices.
    pub fn scale_add(&mut self, a: f64, other: &Mat, b: f64) {
        assert_eq!(self.shape(), other.shape());
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x = *x * a + *y * b;
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `self · other` (shapes `m×k` · `k×n`).
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let orow = out.row_mut(r);
            for (k, &l) in lhs.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let rhs = other.row(k);
                for (o, &x) in orow.iter_mut().zip(rhs.iter()) {
                    *o += l * x;
                }
            }
        }
        out
    }

    /// `self · otherᵀ` (shapes `m×k` · `n×k`).
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let lhs = self.row(r);
            for c in 0..other.rows {
                out.set(r, c, dot(lhs, other.row(c)));
            }
        }
        out
    }

    /// `selfᵀ · other` (shapes `k×m` · `k×n`).
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let lhs = self.row(k);
            let rhs = other.row(k);
            for (r, &l) in lhs.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let orow = out.row_mut(r);
                for (o, &x) in orow.iter_mut().zip(rhs.iter()) {
                    *o += l * x;
                }
            }
        }
        out
    }

    /// Copy the given rows into a new `len(indices)×cols` matrix.
    pub fn gather_rows(&self, indices: &[u32]) -> Mat {
        let mut out = Mat::zeros(indices.len(), self.cols);
        for (j, &r) in indices.iter().enumerate() {
            out.row_mut(j).copy_from_slice(self.row(r as usize));
        }
        out
    }

    /// Vertically stack matrices with identical column counts.
    pub fn vstack(parts: &[&Mat]) -> Mat {
        let cols = parts[0].cols;
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            assert_eq!(m.cols, cols);
            data.extend_from_slice(&m.data);
        }
        Mat { rows, cols, data }
    }

    /// Round every entry through `f32`, the storage precision of checkpoints
    /// and embedding files. Evaluation runs on quantized snapshots so a
    /// reloaded checkpoint reproduces training-time metrics exactly.
    pub fn quantized(&self) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity with the zero-norm convention `cos := 0`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na <= ZERO_NORM_EPS || nb <= ZERO_NORM_EPS {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Below this norm a vector is treated as zero for cosine purposes.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Numerically stable in-place row softmax.
pub fn softmax_rows(m: &mut Mat) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// log(Σ exp(row)) computed stably.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_products_agree_with_matmul() {
        let a = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let b = Mat::from_fn(5, 4, |r, c| (r + c) as f64 * 0.25);
        let via_t = a.matmul_t(&b);
        // oracle: explicit loops
        for r in 0..3 {
            for c in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(r, k) * b.get(c, k);
                }
                assert!((via_t.get(r, c) - s).abs() < 1e-12);
            }
        }
        let at_b = a.t_matmul(&Mat::from_fn(3, 2, |r, c| (r + 2 * c) as f64));
        assert_eq!(at_b.shape(), (4, 2));
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut m = Mat::from_vec(3, 4, vals);
            softmax_rows(&mut m);
            for r in 0..3 {
                let s: f64 = m.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(m.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(vals in proptest::collection::vec(-20.0f64..20.0, 5), shift in -50.0f64..50.0) {
            let mut a = Mat::from_vec(1, 5, vals.clone());
            let mut b = Mat::from_vec(1, 5, vals.iter().map(|v| v + shift).collect());
            softmax_rows(&mut a);
            softmax_rows(&mut b);
            for c in 0..5 {
                prop_assert!((a.get(0, c) - b.get(0, c)).abs() < 1e-9);
            }
        }

        #[test]
        fn cosine_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            s in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            let c1 = cosine(&a, &b);
            let c2 = cosine(&scaled, &b);
            prop_assert!((c1 - c2).abs() < 1e-9);
        }
    }
}
