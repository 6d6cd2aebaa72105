//! Small dense linear-algebra helpers shared by the GP and NMPC code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added on the first retry of a failed factorization.
pub const BASE_JITTER: f64 = 1e-10;
/// Number of jitter doublings attempted before giving up.
pub const JITTER_RETRIES: usize = 6;

/// Cholesky factorization with the jitter-retry policy.
///
/// `base_jitter` is added to the diagonal up front (pass `0.0` to try the
/// bare matrix first). On failure the jitter starts at `scale * BASE_JITTER`
/// and doubles up to [`JITTER_RETRIES`] times. Returns the factor and the
/// jitter that was finally applied.
pub fn cholesky_jittered(
    mat: &DMatrix<f64>,
    base_jitter: f64,
    scale: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = base_jitter;
    for attempt in 0..=JITTER_RETRIES {
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            if ch.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok((ch, jitter));
            }
        }
        if attempt < JITTER_RETRIES {
            jitter = if jitter > 0.0 { 2.0 * jitter } else { scale * BASE_JITTER };
        }
    }
    Err(Error::SingularKernel(format!(
        "factorization of {}x{} matrix failed after {} jitter retries (last jitter {:.3e})",
        mat.nrows(),
        mat.ncols(),
        JITTER_RETRIES,
        jitter
    )))
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_upper_transpose_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

pub fn solve_upper_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

/// `log det(L Lᵀ)` from a lower-triangular factor.
pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of `L Lᵀ` from its lower-triangular factor.
pub fn inverse_from_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let linv = solve_lower(l, &DMatrix::identity(n, n));
    linv.transpose() * linv
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}
