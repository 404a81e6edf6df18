use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Adds `damping * mean(diag(h))` to the diagonal of `h`.
pub fn damp(h: &Matrix, damping: f64) -> Result<Matrix> {
    if !h.is_square() {
        return Err(Error::DimensionMismatch {
            op: "damp",
            left: h.shape(),
            right: (h.cols(), h.rows()),
        });
    }
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::param(format!("damping must be finite and >= 0, got {damping}")));
    }
    let n = h.rows();
    let mut out = h.clone();
    if damping > 0.0 && n > 0 {
        let shift = damping * h.diagonal().iter().sum::<f64>() / n as f64;
        for i in 0..n {
            out[(i, i)] += shift;
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `h = L Lᵀ`.
///
/// Only the lower triangle of `h` is read.
pub fn cholesky(h: &Matrix) -> Result<Matrix> {
    if !h.is_square() {
        return Err(Error::DimensionMismatch {
            op: "cholesky",
            left: h.shape(),
            right: (h.cols(), h.rows()),
        });
    }
    let n = h.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = h[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::SingularHessian { pivot: j });
        }
        let pivot = diag.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = rhs` given the lower factor.
pub fn solve_with_factor(l: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if rhs.rows() != n {
        return Err(Error::DimensionMismatch {
            op: "cholesky_solve",
            left: l.shape(),
            right: rhs.shape(),
        });
    }
    let mut x = rhs.clone();
    for c in 0..rhs.cols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
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

/// Solves `(h + damping·mean(diag(h))·I) x = rhs` for symmetric positive-definite `h`.
pub fn cholesky_solve(h: &Matrix, rhs: &Matrix, damping: f64) -> Result<Matrix> {
    let damped = damp(h, damping)?;
    if rhs.rows() != h.rows() {
        return Err(Error::DimensionMismatch {
            op: "cholesky_solve",
            left: h.shape(),
            right: rhs.shape(),
        });
    }
    let l = cholesky(&damped)?;
    solve_with_factor(&l, rhs)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(h: &Matrix) -> Result<Matrix> {
    let l = cholesky(h)?;
    let inv = solve_with_factor(&l, &Matrix::identity(h.rows()))?;
    // symmetrize away round-off
    let n = inv.rows();
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)])))
}

/// Softmax of `v / tau`, computed with max-subtraction.
pub fn softmax_with_temperature(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    if v.is_empty() {
        return Err(Error::param("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("softmax input must be finite"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Dense Gaussian elimination with partial pivoting, independent of the Cholesky path.
    fn gauss_solve(a: &Matrix, b: &Matrix) -> Matrix {
        let n = a.rows();
        let m = b.cols();
        let mut aug = Matrix::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            for j in 0..m {
                aug[(i, n + j)] = b[(i, j)];
            }
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[(x, col)].abs().total_cmp(&aug[(y, col)].abs()))
                .unwrap();
            for j in 0..n + m {
                let tmp = aug[(col, j)];
                aug[(col, j)] = aug[(piv, j)];
                aug[(piv, j)] = tmp;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[(r, col)] / aug[(col, col)];
                    for j in 0..n + m {
                        aug[(r, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        Matrix::from_fn(n, m, |i, j| aug[(i, n + j)] / aug[(i, i)])
    }

    fn random_spd(rng: &mut Rng, n: usize) -> Matrix {
        let a = rng.normal_matrix(n, n + 3);
        let mut h = a.gram();
        for i in 0..n {
            h[(i, i)] += 0.1;
        }
        h
    }

    #[test]
    fn identity_system() {
        let v = Matrix::column_vector(&[1.0, -2.0, 3.5]);
        let x = cholesky_solve(&Matrix::identity(3), &v, 0.0).unwrap();
        assert_eq!(x, v);
    }

    #[test]
    fn diagonal_system() {
        let h = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = cholesky_solve(&h, &Matrix::column_vector(&[2.0, 4.0]), 0.0).unwrap();
        assert!(x.max_abs_diff(&Matrix::column_vector(&[1.0, 1.0])) < 1e-15);
    }

    #[test]
    fn random_spd_matches_gaussian_elimination() {
        let mut rng = Rng::new(21);
        let h = random_spd(&mut rng, 6);
        let b = rng.normal_matrix(6, 2);
        let x = cholesky_solve(&h, &b, 0.0).unwrap();
        let oracle = gauss_solve(&h, &b);
        assert!(x.max_abs_diff(&oracle) <= 1e-9);
    }

    #[test]
    fn damping_shifts_by_mean_diagonal() {
        let h = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        // mean diag 3, damping 0.5 -> +1.5
        let x = cholesky_solve(&h, &Matrix::column_vector(&[3.5, 5.5]), 0.5).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_reports_pivot() {
        let h = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        match cholesky_solve(&h, &Matrix::column_vector(&[1.0, 1.0]), 0.0) {
            Err(Error::SingularHessian { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected singular Hessian, got {other:?}"),
        }
        assert!(cholesky_solve(&h, &Matrix::column_vector(&[1.0, 1.0]), 0.01).is_ok());
        assert!(cholesky_solve(&h, &Matrix::column_vector(&[1.0]), 0.0).is_err());
        assert!(cholesky_solve(&h, &Matrix::column_vector(&[1.0, 1.0]), -1.0).is_err());
    }

    #[test]
    fn spd_inverse_round_trip() {
        let mut rng = Rng::new(4);
        let h = random_spd(&mut rng, 5);
        let inv = spd_inverse(&h).unwrap();
        assert!(h.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(5)) < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_with_temperature(&[1.0, 1.0, 1.0], 1.0).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_with_temperature(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
        // First-order deviation from 1/3 is (v_i - mean(v)) / (3 tau), at most ~1.43e-6 here.
        let hot = softmax_with_temperature(&[5.0, -3.0, 0.2], 1e6).unwrap();
        for p in &hot {
            assert!((p - 1.0 / 3.0).abs() < 1.5e-6);
        }
        let hotter = softmax_with_temperature(&[5.0, -3.0, 0.2], 1e7).unwrap();
        for p in &hotter {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax_with_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0], -2.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cholesky_residual_within_bound(seed in 0u64..5_000, n in 1usize..9, damping in 0.0f64..0.1) {
            let mut rng = Rng::new(seed);
            let h = random_spd(&mut rng, n);
            let b = rng.normal_matrix(n, 1);
            let x = cholesky_solve(&h, &b, damping).unwrap();
            let damped = damp(&h, damping).unwrap();
            let residual = damped.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
            proptest::prop_assert!(residual <= 1e-8 * b.frobenius_norm());
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0, tau in 0.1f64..10.0) {
            let a = softmax_with_temperature(&v, tau).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax_with_temperature(&shifted, tau).unwrap();
            let total: f64 = a.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-12);
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!(*x > 0.0 && *x <= 1.0);
                proptest::prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
