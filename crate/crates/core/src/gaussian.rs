//! Gaussian modality. The score prior is conjugate, so the E-step and the
//! M-step are both closed form.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, quad_form};
use crate::model::Modality;

/// Floor applied to updated noise variances.
pub const NOISE_VAR_FLOOR: f64 = 1e-12;

/// Posterior `N(means[:, m], cov)` of every column's scores; the covariance
/// does not depend on the column.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    /// K x M posterior means.
    pub means: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

fn check_shapes(
    values: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    noise_var: &DVector<f64>,
) -> Result<()> {
    if values.nrows() != loadings.nrows() || noise_var.len() != loadings.nrows() {
        return Err(Error::Shape(format!(
            "values have {} rows, loadings {}, noise variances {}",
            values.nrows(),
            loadings.nrows(),
            noise_var.len()
        )));
    }
    Ok(())
}

/// `C^T diag(1/sigma2)` as a K x P matrix.
fn weighted_loadings_t(loadings: &DMatrix<f64>, noise_var: &DVector<f64>) -> DMatrix<f64> {
    let mut ct = loadings.transpose();
    for (i, mut col) in ct.column_iter_mut().enumerate() {
        col /= noise_var[i];
    }
    ct
}

/// Posterior covariance `(C^T Sigma^{-1} C + S^{-1})^{-1}`, shared by all columns.
pub fn posterior_cov(
    loadings: &DMatrix<f64>,
    noise_var: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let ct_w = weighted_loadings_t(loadings, noise_var);
    let precision = &ct_w * loadings + linalg::spd_inverse(prior_cov)?;
    linalg::spd_inverse(&precision)
}

pub fn e_step(
    values: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    noise_var: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<GaussianPosterior> {
    if values.ncols() == 0 {
        return Err(Error::ModalityAbsent { modality: Modality::Gaussian });
    }
    check_shapes(values, loadings, noise_var)?;
    if noise_var.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::Invalid("noise variances must be positive".into()));
    }
    let ct_w = weighted_loadings_t(loadings, noise_var);
    let prior_precision = linalg::spd_inverse(prior_cov)?;
    let cov = linalg::spd_inverse(&(&ct_w * loadings + &prior_precision))?;
    let prior_term = &prior_precision * prior_mean;
    let mut rhs = &ct_w * values;
    for mut col in rhs.column_iter_mut() {
        col += &prior_term;
    }
    Ok(GaussianPosterior { means: &cov * rhs, cov })
}

/// Exact expected complete-data log-likelihood of the Gaussian modality.
pub fn expected_cll(
    post: &GaussianPosterior,
    values: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    noise_var: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<f64> {
    check_shapes(values, loadings, noise_var)?;
    let (p, m, k) = (values.nrows(), values.ncols(), loadings.ncols());
    let fitted = loadings * &post.means;
    let mut total = 0.0;
    for i in 0..p {
        let c = linalg::row_vector(loadings, i);
        let spread = quad_form(&post.cov, &c);
        let log_norm = (2.0 * PI * noise_var[i]).ln();
        for j in 0..m {
            let r = fitted[(i, j)] - values[(i, j)];
            total += (spread + r * r) / noise_var[i] + log_norm;
        }
    }
    let precision = linalg::spd_inverse(prior_cov)?;
    let cov_term = linalg::trace_of_product(&precision, &post.cov);
    for j in 0..m {
        let d = post.means.column(j) - prior_mean;
        total += cov_term + quad_form(&precision, &d.into_owned());
    }
    total += m as f64 * (k as f64 * (2.0 * PI).ln() + linalg::log_det_spd(prior_cov)?);
    Ok(-0.5 * total)
}

/// Closed-form updates of the prior mean, prior covariance and per-object
/// noise variances.
pub fn m_step(
    post: &GaussianPosterior,
    values: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let m = post.means.ncols();
    if m == 0 {
        return Err(Error::ModalityAbsent { modality: Modality::Gaussian });
    }
    let means: Vec<DVector<f64>> = post.means.column_iter().map(|c| c.into_owned()).collect();
    let (alpha, second) =
        crate::poisson::mean_and_second_moment(&means, std::iter::repeat_n(&post.cov, m))
            .expect("nonempty");
    let s = linalg::ensure_spd(&(second - &alpha * alpha.transpose()))?;

    let fitted = loadings * &post.means;
    let noise_var = DVector::from_fn(loadings.nrows(), |i, _| {
        let c = linalg::row_vector(loadings, i);
        let resid: f64 = (0..m).map(|j| (values[(i, j)] - fitted[(i, j)]).powi(2)).sum();
        (resid / m as f64 + quad_form(&post.cov, &c)).max(NOISE_VAR_FLOOR)
    });
    Ok((alpha, s, noise_var))
}

/// Marginal log-likelihood of the observed columns,
/// `z_m ~ N(C alpha, C S C^T + Sigma)`.
pub fn observed_log_likelihood(
    values: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    noise_var: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<f64> {
    check_shapes(values, loadings, noise_var)?;
    let p = values.nrows();
    let cov = loadings * prior_cov * loadings.transpose() + DMatrix::from_diagonal(noise_var);
    let chol = linalg::cholesky(&linalg::symmetrize(&cov))
        .ok_or_else(|| Error::Factorization("marginal covariance of the Gaussian modality".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mean = loadings * prior_mean;
    let mut total = 0.0;
    for col in values.column_iter() {
        let d = col - &mean;
        let solved = chol.solve(&d);
        total += d.dot(&solved);
    }
    let m = values.ncols() as f64;
    Ok(-0.5 * (total + m * (log_det + p as f64 * (2.0 * PI).ln())))
}
