//! Small shared linear-algebra helpers on top of nalgebra.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix of shape {rows}x{cols} is not symmetric positive definite")]
    NotPositiveDefinite { rows: usize, cols: usize },

    #[error("dimension mismatch: left has {left} rows, right has {right}")]
    ShapeMismatch { left: usize, right: usize },
}

static RANK_DEFICIENT_LOGGED: AtomicBool = AtomicBool::new(false);

/// Minimum-norm least-squares solution of `a · x = b` via SVD.
///
/// Full-rank systems reproduce the normal-equation solution; rank-deficient
/// systems fall back to the minimum-norm solution and log a warning once.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    if a.nrows() != b.nrows() {
        return Err(LinalgError::ShapeMismatch {
            left: a.nrows(),
            right: b.nrows(),
        });
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    if rank < a.ncols() && !RANK_DEFICIENT_LOGGED.swap(true, Ordering::Relaxed) {
        log::warn!(
            "rank-deficient design ({}x{}, rank {rank}); using minimum-norm solution (reported once)",
            a.nrows(),
            a.ncols()
        );
    }
    svd.solve(b, eps)
        .map_err(|_| LinalgError::NotPositiveDefinite {
            rows: a.nrows(),
            cols: a.ncols(),
        })
}

/// Solves the SPD system `m · x = rhs` and returns `(x, m⁻¹)`.
///
/// The explicit inverse is needed by callers that consume posterior
/// covariances, so it is produced from the same Cholesky factorization.
pub fn solve_spd_with_inverse(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LinalgError> {
    let chol = m.clone().cholesky().ok_or(LinalgError::NotPositiveDefinite {
        rows: m.nrows(),
        cols: m.ncols(),
    })?;
    let x = chol.solve(rhs);
    let inv = chol.inverse();
    Ok((x, inv))
}

/// Numerical rank from the diagonal of a column-pivoted QR factorization,
/// with tolerance `max(n, p) · eps · |r₀₀|`.
pub fn qr_rank(m: &DMatrix<f64>) -> usize {
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let k = r.nrows().min(r.ncols());
    if k == 0 {
        return 0;
    }
    let r00 = r[(0, 0)].abs();
    if r00 == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * r00;
    (0..k).take_while(|&i| r[(i, i)].abs() > tol).count()
}

/// `trace(a · b)` without forming the product; `a` is `m×k`, `b` is `k×m`.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Quadratic form `vᵀ · m · v`.
pub fn quadratic_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (m * v).dot(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn lstsq_matches_normal_equations_for_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 20, 3);
            let b = random_matrix(&mut rng, 20, 2);
            let x = lstsq(&a, &b).unwrap();
            let ata = a.transpose() * &a;
            let atb = a.transpose() * &b;
            let oracle = ata.lu().solve(&atb).unwrap();
            for (got, want) in x.iter().zip(oracle.iter()) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn lstsq_handles_duplicated_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let base = random_matrix(&mut rng, 12, 2);
        let mut a = DMatrix::zeros(12, 3);
        a.set_column(0, &base.column(0));
        a.set_column(1, &base.column(1));
        a.set_column(2, &base.column(1));
        let b = random_matrix(&mut rng, 12, 1);
        let x = lstsq(&a, &b).unwrap();
        let resid = &a * &x - &b;
        // Residual orthogonality to the column space still must hold.
        let proj = a.transpose() * resid;
        assert!(proj.norm() <= 1e-9);
    }

    #[test]
    fn spd_solve_and_inverse_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = random_matrix(&mut rng, 8, 8);
        let m = a.transpose() * &a + DMatrix::identity(8, 8);
        let rhs = random_matrix(&mut rng, 8, 2);
        let (x, inv) = solve_spd_with_inverse(&m, &rhs).unwrap();
        let alt = &inv * &rhs;
        for (got, want) in x.iter().zip(alt.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
        let eye = &m * inv;
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(eye[(i, j)], want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let rhs = DMatrix::zeros(2, 1);
        assert!(solve_spd_with_inverse(&m, &rhs).is_err());
    }

    #[test]
    fn qr_rank_detects_collinearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_matrix(&mut rng, 15, 4);
        assert_eq!(qr_rank(&a), 4);
        let mut b = DMatrix::zeros(15, 5);
        for j in 0..4 {
            b.set_column(j, &a.column(j));
        }
        let dup = a.column(2).into_owned();
        b.set_column(4, &dup);
        assert_eq!(qr_rank(&b), 4);
    }

    #[test]
    fn trace_of_product_matches_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a = random_matrix(&mut rng, 6, 4);
        let b = random_matrix(&mut rng, 4, 6);
        let explicit = (&a * &b).trace();
        assert_abs_diff_eq!(trace_of_product(&a, &b), explicit, epsilon = 1e-12);
    }
}
