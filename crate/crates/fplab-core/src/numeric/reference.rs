//! Scalar f64 reference implementations of the tape primitives.
//!
//! These exist purely as independent oracles for gradient and equivalence
//! tests: naive loops, full f64 precision, no shared code with the production
//! kernels. Finite-difference checks run against these so the quotient is
//! free of f32 storage noise.

use super::tape::{gelu_scalar, RMSNORM_EPS};

/// Dense f64 matrix for oracle computations.
#[derive(Clone, Debug)]
pub struct M64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl M64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub fn from_matrix(m: &super::Matrix) -> Self {
        Self::from_f32(m.rows(), m.cols(), m.data())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn mm(a: &M64, b: &M64) -> M64 {
    assert_eq!(a.cols, b.rows);
    let mut d = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            d[i * b.cols + j] = acc;
        }
    }
    M64::new(a.rows, b.cols, d)
}

pub fn transpose(a: &M64) -> M64 {
    let mut d = vec![0.0; a.rows * a.cols];
    for i in 0..a.rows {
        for j in 0..a.cols {
            d[j * a.rows + i] = a.get(i, j);
        }
    }
    M64::new(a.cols, a.rows, d)
}

pub fn mm_nt(a: &M64, b: &M64) -> M64 {
    mm(a, &transpose(b))
}

pub fn mm_tn(a: &M64, b: &M64) -> M64 {
    mm(&transpose(a), b)
}

pub fn zip(a: &M64, b: &M64, f: impl Fn(f64, f64) -> f64) -> M64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    M64::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
}

pub fn map(a: &M64, f: impl Fn(f64) -> f64) -> M64 {
    M64::new(a.rows, a.cols, a.data.iter().map(|&x| f(x)).collect())
}

pub fn gelu(a: &M64) -> M64 {
    map(a, gelu_scalar)
}

pub fn rmsnorm(a: &M64) -> M64 {
    let mut d = vec![0.0; a.rows * a.cols];
    for i in 0..a.rows {
        let row = a.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / a.cols as f64;
        let r = (ms + RMSNORM_EPS).sqrt();
        for j in 0..a.cols {
            d[i * a.cols + j] = row[j] / r;
        }
    }
    M64::new(a.rows, a.cols, d)
}

pub fn mul_row_broadcast(x: &M64, g: &M64) -> M64 {
    assert_eq!(g.rows, 1);
    let mut d = vec![0.0; x.rows * x.cols];
    for i in 0..x.rows {
        for j in 0..x.cols {
            d[i * x.cols + j] = x.get(i, j) * g.get(0, j);
        }
    }
    M64::new(x.rows, x.cols, d)
}

pub fn causal_softmax(a: &M64) -> M64 {
    let mut d = vec![0.0; a.rows * a.cols];
    for i in 0..a.rows {
        let lim = i + 1;
        let row = &a.data[i * a.cols..i * a.cols + lim];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..lim {
            d[i * a.cols + j] = (row[j] - mx).exp() / denom;
        }
    }
    M64::new(a.rows, a.cols, d)
}

pub fn slice_rows(a: &M64, start: usize, len: usize) -> M64 {
    M64::new(len, a.cols, a.data[start * a.cols..(start + len) * a.cols].to_vec())
}

pub fn slice_cols(a: &M64, start: usize, len: usize) -> M64 {
    let mut d = Vec::with_capacity(a.rows * len);
    for i in 0..a.rows {
        d.extend_from_slice(&a.data[i * a.cols + start..i * a.cols + start + len]);
    }
    M64::new(a.rows, len, d)
}

pub fn concat_rows(parts: &[&M64]) -> M64 {
    let cols = parts[0].cols;
    let mut d = Vec::new();
    let mut rows = 0;
    for p in parts {
        assert_eq!(p.cols, cols);
        rows += p.rows;
        d.extend_from_slice(&p.data);
    }
    M64::new(rows, cols, d)
}

pub fn concat_cols(parts: &[&M64]) -> M64 {
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut d = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            d.extend_from_slice(&p.data[i * p.cols..(i + 1) * p.cols]);
        }
    }
    M64::new(rows, cols, d)
}

pub fn gather_rows(a: &M64, ids: &[u32]) -> M64 {
    let mut d = Vec::with_capacity(ids.len() * a.cols);
    for &id in ids {
        d.extend_from_slice(a.row(id as usize));
    }
    M64::new(ids.len(), a.cols, d)
}

pub fn row_blend(a: &M64, b: &M64, take_b: &[bool]) -> M64 {
    let mut d = Vec::with_capacity(a.rows * a.cols);
    for i in 0..a.rows {
        d.extend_from_slice(if take_b[i] { b.row(i) } else { a.row(i) });
    }
    M64::new(a.rows, a.cols, d)
}

pub fn substitute_row(a: &M64, row: usize, v: &M64) -> M64 {
    let mut d = a.data.clone();
    d[row * a.cols..(row + 1) * a.cols].copy_from_slice(&v.data);
    M64::new(a.rows, a.cols, d)
}

pub fn cross_entropy_sum(logits: &M64, targets: &[u32], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    for t in 0..logits.rows {
        if !mask[t] {
            continue;
        }
        let row = logits.row(t);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[targets[t] as usize];
    }
    total
}

pub fn sum(a: &M64) -> f64 {
    a.data.iter().sum()
}

pub fn frob(a: &M64) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}
