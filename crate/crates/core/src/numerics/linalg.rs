use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower Cholesky factor of `h + jitter * I`. Only the lower triangle of `h` is read.
pub fn cholesky<T: Scalar>(h: &Matrix<T>, jitter: T) -> Result<Matrix<T>> {
    let n = h.rows();
    if h.cols() != n {
        return Err(Error::ShapeMismatch(format!("{}x{} is not square", n, h.cols())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = h[(i, j)];
            let (ri, rj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `(h + jitter * I) X = b` by Cholesky factorization.
pub fn spd_solve<T: Scalar>(h: &Matrix<T>, b: &Matrix<T>, jitter: T) -> Result<Matrix<T>> {
    if b.rows() != h.rows() {
        return Err(Error::ShapeMismatch(format!(
            "right-hand side has {} rows, system has {}",
            b.rows(),
            h.rows()
        )));
    }
    if jitter < T::zero() {
        return Err(Error::InvalidArgument("jitter must be non-negative".into()));
    }
    if !h.is_symmetric(T::of(1e-10)) {
        return Err(Error::NotSymmetric);
    }
    let l = cholesky(h, jitter)?;
    let n = h.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    /// Gaussian elimination with partial pivoting, kept deliberately separate from the Cholesky path.
    fn eliminate(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let n = a.rows();
        let m = b.cols();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
            .collect();
        for col in 0..n {
            let p = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
                .unwrap();
            aug.swap(col, p);
            for r in 0..n {
                if r != col {
                    let f = aug[r][col] / aug[col][col];
                    for c in col..n + m {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        Matrix::from_fn(n, m, |i, j| aug[i][n + j] / aug[i][i])
    }

    #[test]
    fn identity_systems() {
        let b = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        assert_eq!(spd_solve(&Matrix::identity(3), &b, 0.0).unwrap(), b);
        let x = spd_solve(&Matrix::identity(3).scaled(2.0), &Matrix::identity(3), 0.0).unwrap();
        assert!(x.max_abs_diff(&Matrix::identity(3).scaled(0.5)) < 1e-15);
    }

    #[test]
    fn diagonal_exact() {
        let d = Matrix::from_fn(4, 4, |i, j| if i == j { (i + 1) as f64 * 0.7 } else { 0.0 });
        let b = Matrix::from_fn(4, 1, |i, _| (i as f64 + 1.0) * 1.3);
        let x = spd_solve(&d, &b, 0.0).unwrap();
        for i in 0..4 {
            let want = b[(i, 0)] / d[(i, i)];
            assert!((x[(i, 0)] - want).abs() <= f64::EPSILON * want.abs());
        }
    }

    #[test]
    fn random_spd_matches_elimination() {
        let a: Matrix<f64> = crate::numerics::gaussian_matrix(&RngStream::new(3, 0), 8, 8);
        let h = {
            let mut h = a.matmul(&a.transpose()).unwrap();
            h.add_assign(&Matrix::identity(8));
            // exact symmetry
            Matrix::from_fn(8, 8, |i, j| if i >= j { h[(i, j)] } else { h[(j, i)] })
        };
        let b: Matrix<f64> = crate::numerics::gaussian_matrix(&RngStream::new(3, 1), 8, 3);
        let x = spd_solve(&h, &b, 0.0).unwrap();
        let oracle = eliminate(&h, &b);
        assert!(x.max_abs_diff(&oracle) < 1e-10);
        let resid = h.matmul(&x).unwrap().sub(&b).frobenius_norm();
        assert!(resid <= 1e-8 * b.frobenius_norm());
    }

    #[test]
    fn singular_needs_jitter() {
        let h = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = Matrix::identity(2);
        assert!(matches!(
            spd_solve(&h, &b, 0.0),
            Err(Error::NotPositiveDefinite { pivot: 1 })
        ));
        assert!(spd_solve(&h, &b, 1e-6).is_ok());
    }

    #[test]
    fn shape_errors() {
        let h = Matrix::<f64>::identity(3);
        assert!(spd_solve(&h, &Matrix::zeros(2, 1), 0.0).is_err());
        let asym = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(spd_solve(&asym, &Matrix::identity(2), 0.0), Err(Error::NotSymmetric)));
    }
}
