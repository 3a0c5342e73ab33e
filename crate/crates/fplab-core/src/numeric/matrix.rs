//! Dense row-major matrices with 32-bit storage and 64-bit accumulation.
//!
//! All reductions accumulate left-to-right in `f64` and round to `f32` once at
//! store time, so every operation is bit-reproducible across runs and thread
//! counts. Matrices are immutable after construction and cheap to clone (the
//! payload is shared via `Arc`).

use std::sync::Arc;

use crate::error::{Error, Result};

/// Product size above which matmul kernels split output rows across threads.
/// Each output element keeps its own accumulator, so the split never changes
/// summation order.
const PAR_FLOP_THRESHOLD: usize = 1 << 21;

#[derive(Clone, Debug)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Arc<[f32]>,
}

impl PartialEq for Matrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl Matrix {
    /// Builds a matrix from a row-major buffer, rejecting size mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadShape { rows, cols, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self { rows, cols, data: data.into() })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data: data.into() }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_vec_unchecked(n, n, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec_unchecked(rows, cols, data)
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

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// True when both matrices have identical shape and bit-identical entries
    /// (distinguishes `-0.0` from `0.0`, unlike `==`).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0f32; self.numel()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_vec_unchecked(self.cols, self.rows, data)
    }

    /// Elementwise map; the closure sees and returns `f64`, stored as `f32`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v as f64) as f32).collect();
        Matrix::from_vec_unchecked(self.rows, self.cols, data)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimMismatch {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a as f64, b as f64) as f32)
            .collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }
}

fn mm_check(op: &'static str, a: &Matrix, b: &Matrix, inner_ok: bool) -> Result<()> {
    if inner_ok {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            op,
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        })
    }
}

/// `a (m x k) * b (k x n)`.
///
/// For each output element the k-sum runs left to right in `f64`; the kernel
/// iterates i-k-j so the inner j-loop keeps one accumulator per column and
/// vectorizes without reassociating any sum.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    mm_check("matmul", a, b, a.cols == b.rows)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    let kernel = |i: usize, out_row: &mut [f32]| {
        let mut acc = vec![0.0f64; n];
        let a_row = a.row(i);
        for kk in 0..k {
            let aik = a_row[kk] as f64;
            let b_row = &b.data[kk * n..kk * n + n];
            for j in 0..n {
                acc[j] += aik * b_row[j] as f64;
            }
        }
        for j in 0..n {
            out_row[j] = acc[j] as f32;
        }
    };
    run_rows(m, k, n, &mut out, kernel);
    Ok(Matrix::from_vec_unchecked(m, n, out))
}

/// `a (m x k) * b^T` where `b` is `(n x k)`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    mm_check("matmul_nt", a, b, a.cols == b.cols)?;
    let bt = b.transpose();
    matmul(a, &bt)
}

/// `a^T * b` where `a` is `(k x m)` and `b` is `(k x n)`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    mm_check("matmul_tn", a, b, a.rows == b.rows)?;
    let at = a.transpose();
    matmul(&at, b)
}

fn run_rows(m: usize, k: usize, n: usize, out: &mut [f32], kernel: impl Fn(usize, &mut [f32]) + Sync) {
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| kernel(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            kernel(i, row);
        }
    }
}

/// Frobenius norm: sqrt of the sum of squared entries, accumulated in `f64`
/// in storage order.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    let mut acc = 0.0f64;
    for &v in m.data() {
        let v = v as f64;
        acc += v * v;
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal_f32())
    }

    /// Naive triple-loop product in f64, the independent oracle for `matmul`.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        Matrix::from_fn(m, n, |i, j| {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += a.get(i, kk) as f64 * b.get(kk, j) as f64;
            }
            acc as f32
        })
    }

    #[test]
    fn matmul_identity_case() {
        let i = Matrix::identity(2);
        let v = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let out = matmul(&i, &v).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_small_arithmetic() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = Rng::new(7);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data().iter()) {
            let rel = (x - y).abs() / y.abs().max(1e-12);
            assert!(rel <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_dim_mismatch_is_typed() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn matmul_identity_bit_exact_both_sides() {
        let mut rng = Rng::new(11);
        let a = random_matrix(&mut rng, 6, 6);
        let i = Matrix::identity(6);
        assert!(matmul(&i, &a).unwrap().bits_eq(&a));
        assert!(matmul(&a, &i).unwrap().bits_eq(&a));
    }

    #[test]
    fn matmul_variants_match_transposed_naive() {
        let mut rng = Rng::new(13);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 5, 6);
        let nt = matmul_nt(&a, &b).unwrap();
        let oracle = naive_matmul(&a, &b.transpose());
        assert!(nt.bits_eq(&oracle));

        let c = random_matrix(&mut rng, 6, 4);
        let d = random_matrix(&mut rng, 6, 5);
        let tn = matmul_tn(&c, &d).unwrap();
        let oracle = naive_matmul(&c.transpose(), &d);
        assert!(tn.bits_eq(&oracle));
    }

    #[test]
    fn frobenius_trivial_cases() {
        let m = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&m), 5.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn frobenius_matches_scalar_loop_oracle() {
        let mut rng = Rng::new(17);
        let m = random_matrix(&mut rng, 8, 8);
        let mut acc = 0.0f64;
        for &v in m.data() {
            acc += (v as f64) * (v as f64);
        }
        let oracle = acc.sqrt();
        let got = frobenius_norm(&m);
        assert!((got - oracle).abs() <= 1e-6 * oracle.max(1e-12));
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(matches!(Matrix::from_vec(2, 2, vec![0.0; 3]), Err(Error::BadShape { .. })));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    proptest! {
        #[test]
        fn frobenius_absolute_homogeneity(c in -100.0f64..100.0, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let m = random_matrix(&mut rng, 5, 4);
            let scaled = m.scale(c);
            let lhs = frobenius_norm(&scaled);
            let rhs = c.abs() * frobenius_norm(&m);
            let tol = 1e-6 * rhs.max(1e-6);
            prop_assert!((lhs - rhs).abs() <= tol, "{lhs} vs {rhs}");
        }

        #[test]
        fn matmul_parallel_split_is_deterministic(seed in 0u64..50) {
            // Large enough to cross the parallel threshold; result must not
            // depend on the split.
            let mut rng = Rng::new(seed);
            let a = random_matrix(&mut rng, 64, 96);
            let b = random_matrix(&mut rng, 96, 80);
            let x = matmul(&a, &b).unwrap();
            let y = matmul(&a, &b).unwrap();
            prop_assert!(x.bits_eq(&y));
        }
    }
}
