//! Poisson modality: Laplace-approximated E-step (damped Newton to the
//! posterior mode, negative inverse Hessian as covariance) and the closed
//! form M-step for the score prior.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, clipped_exp, inf_norm, quad_form};
use crate::model::Modality;

/// Stopping rule and damping limits for the Newton solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iters: usize,
    /// Target for the infinity norm of the gradient.
    pub grad_tol: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-8,
            max_halvings: 30,
        }
    }
}

/// Gaussian prior on one column's factor scores, with its precision cached.
#[derive(Debug, Clone)]
pub struct ScorePrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub log_det_cov: f64,
}

impl ScorePrior {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || !cov.is_square() {
            return Err(Error::Shape(format!(
                "prior covariance is {}x{} for a mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        Ok(Self {
            mean: mean.clone(),
            cov: cov.clone(),
            precision: linalg::spd_inverse(cov)?,
            log_det_cov: linalg::log_det_spd(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `-(x - mean)^T R^{-1} (x - mean) / 2`
    pub fn log_kernel(&self, x: &DVector<f64>) -> f64 {
        -0.5 * quad_form(&self.precision, &(x - &self.mean))
    }
}

/// Laplace posterior `N(mode_n, cov_n)` for every Poisson column.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonPosterior {
    pub modes: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl PoissonPosterior {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// Result of one column's E-step.
#[derive(Debug, Clone)]
pub struct ColumnPosterior {
    pub mode: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub clip_events: usize,
}

/// Rates `exp(c_i^T x)` for every object, plus the number of clipped exponents.
fn rates(loadings: &DMatrix<f64>, x: &DVector<f64>) -> (DVector<f64>, usize) {
    let eta = loadings * x;
    let mut clips = 0;
    let r = eta.map(|t| {
        let (v, c) = clipped_exp(t);
        clips += c as usize;
        v
    });
    (r, clips)
}

/// Unnormalized log posterior of one column's scores:
/// `sum_i (-exp(c_i^T x) + y_i c_i^T x) - (x - zeta)^T R^{-1} (x - zeta) / 2`.
pub fn log_posterior(
    x: &DVector<f64>,
    y: &DVector<f64>,
    loadings: &DMatrix<f64>,
    prior: &ScorePrior,
) -> f64 {
    let eta = loadings * x;
    let lik: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(&t, &yi)| -clipped_exp(t).0 + yi * t)
        .sum();
    lik + prior.log_kernel(x)
}

pub fn gradient(
    x: &DVector<f64>,
    y: &DVector<f64>,
    loadings: &DMatrix<f64>,
    prior: &ScorePrior,
) -> DVector<f64> {
    let (r, _) = rates(loadings, x);
    loadings.transpose() * (y - r) - &prior.precision * (x - &prior.mean)
}

/// `-sum_i exp(c_i^T x) c_i c_i^T - R^{-1}`; negative definite everywhere.
pub fn hessian(x: &DVector<f64>, loadings: &DMatrix<f64>, prior: &ScorePrior) -> DMatrix<f64> {
    let (r, _) = rates(loadings, x);
    -(weighted_gram(loadings, &r) + &prior.precision)
}

/// `sum_i w_i c_i c_i^T`
pub(crate) fn weighted_gram(loadings: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = loadings.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    loadings.transpose() * scaled
}

/// Finds the posterior mode of one column by damped Newton and returns the
/// Laplace covariance there.
pub fn e_step_column(
    y: &DVector<f64>,
    loadings: &DMatrix<f64>,
    prior: &ScorePrior,
    x0: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<ColumnPosterior> {
    if y.len() != loadings.nrows() || x0.len() != prior.dim() || loadings.ncols() != prior.dim() {
        return Err(Error::Shape(format!(
            "Poisson column of length {} against {}x{} loadings and a {}-dim prior",
            y.len(),
            loadings.nrows(),
            loadings.ncols(),
            prior.dim()
        )));
    }
    let ct = loadings.transpose();
    let mut x = x0.clone();
    let mut clip_events = 0;
    let mut value = log_posterior(&x, y, loadings, prior);
    let mut iterations = 0;
    let mut grad_norm;

    loop {
        let (r, clips) = rates(loadings, &x);
        clip_events += clips;
        let grad = &ct * (y - &r) - &prior.precision * (&x - &prior.mean);
        grad_norm = inf_norm(&grad);
        let neg_hess = weighted_gram(loadings, &r) + &prior.precision;
        if grad_norm < opts.grad_tol {
            return finish(x, &neg_hess, iterations, grad_norm, clip_events);
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;

        let chol = linalg::cholesky(&neg_hess)
            .ok_or_else(|| Error::Factorization("Poisson posterior Hessian".into()))?;
        let step = chol.solve(&grad);
        if in_rounding_regime(&grad, &step, value) {
            // The objective cannot resolve the remaining gain: take the pure Newton step.
            x += &step;
            value = log_posterior(&x, y, loadings, prior);
            continue;
        }
        match backtrack(&x, &step, value, opts.max_halvings, |cand| {
            log_posterior(cand, y, loadings, prior)
        }) {
            Some((next, next_value, t)) => {
                let moved = t * inf_norm(&step);
                x = next;
                value = next_value;
                if moved <= f64::EPSILON * (1.0 + inf_norm(&x)) {
                    // Stalled at floating-point resolution.
                    if stalled_at_optimum(grad_norm, &r, y, loadings, prior, &x) {
                        return finish(x, &neg_hess, iterations, grad_norm, clip_events);
                    }
                    break;
                }
            }
            None => {
                if stalled_at_optimum(grad_norm, &r, y, loadings, prior, &x) {
                    return finish(x, &neg_hess, iterations, grad_norm, clip_events);
                }
                break;
            }
        }
    }
    Err(Error::NotConverged {
        what: "Poisson E-step",
        iterations,
        grad_norm,
        last: x.iter().copied().collect(),
    })
}

fn finish(
    mode: DVector<f64>,
    neg_hess: &DMatrix<f64>,
    iterations: usize,
    grad_norm: f64,
    clip_events: usize,
) -> Result<ColumnPosterior> {
    let cov = linalg::spd_inverse(neg_hess)?;
    Ok(ColumnPosterior {
        mode,
        cov,
        iterations,
        grad_norm,
        clip_events,
    })
}

/// When the line search can no longer improve the objective, accept the
/// iterate if the gradient is at the rounding level of its own terms.
fn stalled_at_optimum(
    grad_norm: f64,
    r: &DVector<f64>,
    y: &DVector<f64>,
    loadings: &DMatrix<f64>,
    prior: &ScorePrior,
    x: &DVector<f64>,
) -> bool {
    let scale: f64 = loadings
        .row_iter()
        .enumerate()
        .map(|(i, c)| (r[i] + y[i]) * c.amax())
        .sum::<f64>()
        + inf_norm(&(&prior.precision * (x - &prior.mean)))
        + 1.0;
    grad_norm <= 1e-9 * scale
}

/// True when the predicted gain of a Newton step, half the Newton
/// decrement, is below the rounding level of the objective value.
pub(crate) fn in_rounding_regime(grad: &DVector<f64>, step: &DVector<f64>, value: f64) -> bool {
    let gain = 0.5 * grad.dot(step);
    gain.is_finite() && gain <= 1e3 * f64::EPSILON * (1.0 + value.abs())
}

/// Step-halving line search: returns the first point along `step` (full
/// step first) whose objective is not below `value`.
pub(crate) fn backtrack<F>(
    x: &DVector<f64>,
    step: &DVector<f64>,
    value: f64,
    max_halvings: usize,
    objective: F,
) -> Option<(DVector<f64>, f64, f64)>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut t = 1.0;
    for _ in 0..=max_halvings {
        let cand = x + step * t;
        let v = objective(&cand);
        if v >= value && v.is_finite() {
            return Some((cand, v, t));
        }
        t *= 0.5;
    }
    None
}

/// E-step over every Poisson column, warm-started from `warm` when given.
/// Columns are independent and solved in parallel.
pub fn e_step(
    counts: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    prior: &ScorePrior,
    warm: Option<&PoissonPosterior>,
    opts: &NewtonOptions,
) -> Result<(PoissonPosterior, usize)> {
    let n = counts.ncols();
    if n == 0 {
        return Err(Error::ModalityAbsent { modality: Modality::Poisson });
    }
    let warm = warm.filter(|w| w.len() == n && w.modes.iter().all(|m| m.len() == prior.dim()));
    let columns: Vec<ColumnPosterior> = (0..n)
        .into_par_iter()
        .map(|j| {
            let y = counts.column(j).into_owned();
            let x0 = warm.map_or(&prior.mean, |w| &w.modes[j]);
            e_step_column(&y, loadings, prior, x0, opts)
        })
        .collect::<Result<_>>()?;
    let clips = columns.iter().map(|c| c.clip_events).sum();
    let (modes, covs) = columns.into_iter().map(|c| (c.mode, c.cov)).unzip();
    Ok((PoissonPosterior { modes, covs }, clips))
}

/// `E[exp(c^T x)]` for `x ~ N(mean, cov)`: `exp(c^T mean + c^T cov c / 2)`.
pub fn expected_exp(c: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    clipped_exp(c.dot(mean) + 0.5 * quad_form(cov, c)).0
}

/// Expected complete-data log-likelihood of the Poisson modality under the
/// Laplace posteriors, with the additive constant (including `log y!`) set to 0.
pub fn expected_cll(
    post: &PoissonPosterior,
    counts: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    prior: &ScorePrior,
) -> f64 {
    let n = post.len();
    let rows: Vec<DVector<f64>> = (0..loadings.nrows()).map(|i| linalg::row_vector(loadings, i)).collect();
    let mut total = 0.0;
    for j in 0..n {
        let (xi, psi) = (&post.modes[j], &post.covs[j]);
        for (i, c) in rows.iter().enumerate() {
            total += -expected_exp(c, xi, psi) + counts[(i, j)] * c.dot(xi);
        }
        let second_moment = psi + xi * xi.transpose();
        total += -0.5 * linalg::trace_of_product(&prior.precision, &second_moment)
            + prior.mean.dot(&(&prior.precision * xi));
    }
    total - 0.5 * n as f64 * quad_form(&prior.precision, &prior.mean) - 0.5 * n as f64 * prior.log_det_cov
}

/// Closed-form prior update: the mean of the posterior modes and the
/// posterior second moment minus the outer product of that mean.
pub fn m_step(post: &PoissonPosterior) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mean, second) = mean_and_second_moment(&post.modes, &post.covs)
        .ok_or(Error::ModalityAbsent { modality: Modality::Poisson })?;
    let cov = second - &mean * mean.transpose();
    Ok((mean, linalg::ensure_spd(&cov)?))
}

/// `(mean of m_n, mean of (V_n + m_n m_n^T))`, or `None` when empty.
pub(crate) fn mean_and_second_moment<'a, I>(
    means: &[DVector<f64>],
    covs: I,
) -> Option<(DVector<f64>, DMatrix<f64>)>
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    let n = means.len();
    if n == 0 {
        return None;
    }
    let k = means[0].len();
    let mut mean = DVector::zeros(k);
    let mut second = DMatrix::zeros(k, k);
    for (m, v) in means.iter().zip(covs) {
        mean += m;
        second += v + m * m.transpose();
    }
    Some((mean / n as f64, second / n as f64))
}
