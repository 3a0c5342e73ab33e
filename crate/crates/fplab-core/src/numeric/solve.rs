//! Cholesky solve for symmetric positive-definite systems.

use crate::error::{Error, Result};
use crate::numeric::matrix::{frobenius_norm, Matrix};

/// Ridge policy for [`solve_spd`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// Use exactly this value (must be >= 0).
    Fixed(f64),
    /// `1e-4 * trace(G) / dim`, sized to regularize the near-singular Gram
    /// matrices that arise from low-rank weight differences.
    Auto,
}

impl Ridge {
    pub fn value(self, g: &Matrix) -> f64 {
        match self {
            Ridge::Fixed(v) => v,
            Ridge::Auto => {
                let n = g.rows();
                let mut tr = 0.0f64;
                for i in 0..n {
                    tr += g.get(i, i) as f64;
                }
                1e-4 * tr / n as f64
            }
        }
    }
}

/// Solves `(G + ridge*I) X = rhs` for symmetric positive-definite `G` via a
/// Cholesky factorization carried out in `f64`.
///
/// `G` must be square and symmetric within `1e-5`; the factorization fails
/// with a typed error if the ridged matrix is not positive definite.
pub fn solve_spd(g: &Matrix, rhs: &Matrix, ridge: Ridge) -> Result<Matrix> {
    let n = g.rows();
    if g.cols() != n {
        return Err(Error::NotSymmetric);
    }
    if rhs.rows() != n {
        return Err(Error::DimMismatch {
            op: "solve_spd",
            left_rows: g.rows(),
            left_cols: g.cols(),
            right_rows: rhs.rows(),
            right_cols: rhs.cols(),
        });
    }
    let sym_tol = 1e-5 * (1.0 + frobenius_norm(g) / (n as f64));
    for i in 0..n {
        for j in (i + 1)..n {
            if (g.get(i, j) as f64 - g.get(j, i) as f64).abs() > sym_tol {
                return Err(Error::NotSymmetric);
            }
        }
    }
    let ridge = ridge.value(g);
    if ridge < 0.0 {
        return Err(Error::InvalidArg("ridge must be >= 0".into()));
    }

    // Lower-triangular factor in f64.
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g.get(i, j) as f64;
            if i == j {
                sum += ridge;
            }
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite { ridge });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }

    // Forward/back substitution per right-hand-side column.
    let m = rhs.cols();
    let mut x = vec![0.0f64; n * m];
    for c in 0..m {
        // L y = rhs
        for i in 0..n {
            let mut sum = rhs.get(i, c) as f64;
            for k in 0..i {
                sum -= l[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = sum / l[i * n + i];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut sum = x[i * m + c];
            for k in (i + 1)..n {
                sum -= l[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = sum / l[i * n + i];
        }
    }
    Ok(Matrix::from_vec_unchecked(n, m, x.into_iter().map(|v| v as f32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::matrix::{matmul, matmul_tn};
    use crate::numeric::Rng;

    #[test]
    fn identity_system() {
        let g = Matrix::identity(2);
        let rhs = Matrix::from_vec(2, 1, vec![2.0, 6.0]).unwrap();
        let x = solve_spd(&g, &rhs, Ridge::Fixed(0.0)).unwrap();
        assert_eq!(x.data(), &[2.0, 6.0]);
    }

    #[test]
    fn diagonal_system() {
        let g = Matrix::from_vec(2, 2, vec![4.0, 0.0, 0.0, 9.0]).unwrap();
        let rhs = Matrix::from_vec(2, 1, vec![4.0, 9.0]).unwrap();
        let x = solve_spd(&g, &rhs, Ridge::Fixed(0.0)).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0]);
    }

    #[test]
    fn random_spd_residual_oracle() {
        let mut rng = Rng::new(3);
        let b = Matrix::from_fn(6, 6, |_, _| rng.normal_f32());
        // G = B^T B + I is SPD by construction.
        let g = matmul_tn(&b, &b).unwrap().add(&Matrix::identity(6)).unwrap();
        let rhs = Matrix::from_fn(6, 2, |_, _| rng.normal_f32());
        let x = solve_spd(&g, &rhs, Ridge::Fixed(0.0)).unwrap();
        let residual = matmul(&g, &x).unwrap().sub(&rhs).unwrap();
        let rel = frobenius_norm(&residual) / frobenius_norm(&rhs);
        assert!(rel <= 1e-4, "relative residual {rel}");
    }

    #[test]
    fn non_positive_definite_is_typed() {
        let g = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap(); // eigenvalues 3, -1
        let rhs = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            solve_spd(&g, &rhs, Ridge::Fixed(0.0)),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn asymmetric_rejected() {
        let g = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        let rhs = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(solve_spd(&g, &rhs, Ridge::Fixed(0.0)), Err(Error::NotSymmetric)));
    }

    #[test]
    fn auto_ridge_rescues_singular_gram() {
        // Rank-1 Gram matrix: singular at ridge 0, solvable with Auto.
        let v = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let g = matmul(&v, &v.transpose()).unwrap();
        let rhs = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(solve_spd(&g, &rhs, Ridge::Fixed(0.0)).is_err());
        assert!(solve_spd(&g, &rhs, Ridge::Auto).is_ok());
    }
}
