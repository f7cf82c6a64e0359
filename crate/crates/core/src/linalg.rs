//! Small dense linear-algebra helpers shared by the modality modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Exponent arguments above this are clipped before `exp`.
pub const EXP_CLIP: f64 = 700.0;

/// Diagonal jitter added when a covariance update fails to factorize.
pub const SPD_JITTER: f64 = 1e-9;

const MAX_RELATIVE_JITTER: f64 = 1e-6;

/// `exp(t)` with the argument clipped at [`EXP_CLIP`]; the flag reports a clip.
#[inline]
pub fn clipped_exp(t: f64) -> (f64, bool) {
    if t > EXP_CLIP {
        (EXP_CLIP.exp(), true)
    } else {
        (t.exp(), false)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square() && cholesky(&symmetrize(m)).is_some()
}

/// Symmetrizes `m` and adds `1e-9 I` (growing tenfold per round) until a
/// Cholesky factorization succeeds. Gives up once the jitter would exceed
/// `1e-6` times the largest diagonal magnitude.
pub fn ensure_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sym = symmetrize(m);
    if cholesky(&sym).is_some() {
        return Ok(sym);
    }
    let n = sym.nrows();
    let scale = sym.diagonal().amax().max(1.0);
    let mut jitter = SPD_JITTER;
    while jitter <= MAX_RELATIVE_JITTER * scale {
        for i in 0..n {
            sym[(i, i)] += jitter;
        }
        if cholesky(&sym).is_some() {
            return Ok(sym);
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization(format!(
        "{n}x{n} matrix could not be made positive definite"
    )))
}

/// Inverse of a symmetric positive definite matrix, returned symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = cholesky(&symmetrize(m))
        .ok_or_else(|| Error::Factorization("matrix is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Inverse with one retry after adding jitter.
pub fn spd_inverse_jittered(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match spd_inverse(m) {
        Ok(inv) => Ok(inv),
        Err(_) => {
            let n = m.nrows();
            let jittered = symmetrize(m) + DMatrix::identity(n, n) * SPD_JITTER;
            spd_inverse(&jittered)
        }
    }
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(&symmetrize(m))
        .ok_or_else(|| Error::Factorization("log-determinant of non-SPD matrix".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `x^T M x`.
#[inline]
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Trace of `a * b` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut t = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            t += a[(i, j)] * b[(j, i)];
        }
    }
    t
}

/// Row `i` of `m` as a column vector.
pub fn row_vector(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}
