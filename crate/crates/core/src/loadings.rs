//! Per-object Newton update of the factor-loading rows `c_i`.
//!
//! The objective for row `i` collects every term of the expected complete
//! data log-likelihood that depends on `c_i`:
//!
//! * Poisson: `sum_n -exp(c^T xi_n + c^T Psi_n c / 2) + y_in c^T xi_n`
//! * Gaussian: `-(M / 2 s_i) c^T B c - (1 / 2 s_i) sum_m (c^T a_m - z_im)^2`
//! * multinomial: `L_i (-c^T U c / 2 + c^T F A h~_i)` with the exact
//!   curvature moment `U` (all blocks of the stacked covariance)
//! * vMF: `kappa_i sum_m sum_k c_k a_mk^T z_im`
//!
//! Every piece is concave, so the Hessian is negative (semi)definite.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, clipped_exp, inf_norm, quad_form};
use crate::model::{Dataset, ModelParams, PosteriorState};
use crate::poisson::{backtrack, in_rounding_regime, NewtonOptions, PoissonPosterior};
use crate::vmf::VmfPosterior;

/// Step size of the gradient-ascent fallback used when the Hessian cannot
/// be factorized.
pub const FALLBACK_STEP: f64 = 1e-3;

struct PoissonTerms<'a> {
    post: &'a PoissonPosterior,
    counts: &'a DMatrix<f64>,
}

struct GaussianTerms<'a> {
    values: &'a DMatrix<f64>,
    noise_var: &'a DVector<f64>,
    means: &'a DMatrix<f64>,
    /// `M B + sum_m a_m a_m^T`
    curvature: DMatrix<f64>,
    cov: &'a DMatrix<f64>,
}

struct MultinomialTerms<'a> {
    trials: &'a [u64],
    /// Curvature moment `U`.
    moment: DMatrix<f64>,
    /// P x K rows `(F A h~_i)^T`.
    linear: DMatrix<f64>,
}

struct VmfTerms<'a> {
    post: &'a VmfPosterior,
    coords: &'a [Vec<Vector3<f64>>],
    obj_conc: &'a DVector<f64>,
}

/// Quantities fixed during one loadings sweep: the current E-step
/// posteriors and the non-loading parameters.
pub struct LoadingProblem<'a> {
    factors: usize,
    pois: Option<PoissonTerms<'a>>,
    gaus: Option<GaussianTerms<'a>>,
    mult: Option<MultinomialTerms<'a>>,
    vmf: Option<VmfTerms<'a>>,
}

/// Outcome of one row's Newton solve.
#[derive(Debug, Clone)]
pub struct RowUpdate {
    pub row: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub fallback_steps: usize,
    pub clip_events: usize,
}

impl<'a> LoadingProblem<'a> {
    /// Uses whichever posteriors are present in `post`.
    pub fn new(dataset: &'a Dataset, params: &'a ModelParams, post: &'a PosteriorState) -> Result<Self> {
        let k = params.factors();
        let pois = post.pois.as_ref().map(|p| PoissonTerms { post: p, counts: &dataset.counts });
        let gaus = post.gaus.as_ref().map(|g| GaussianTerms {
            values: &dataset.values,
            noise_var: &params.noise_var,
            means: &g.means,
            curvature: &g.cov * g.means.ncols() as f64 + &g.means * g.means.transpose(),
            cov: &g.cov,
        });
        let mult = post.mult.as_ref().map(|m| {
            let a = crate::multinomial::curvature(m.cov.blocks() + 1);
            let f = m.mean_matrix();
            MultinomialTerms {
                trials: &dataset.trials,
                moment: m.curvature_moment(),
                linear: &m.pseudo_obs * a * f.transpose(),
            }
        });
        let vmf = match (&post.vmf, &dataset.coords) {
            (Some(v), Some(coords)) => Some(VmfTerms { post: v, coords, obj_conc: &params.vmf_obj_conc }),
            (Some(_), None) => {
                return Err(Error::Invalid("vMF posterior supplied without coordinates".into()))
            }
            _ => None,
        };
        Ok(Self { factors: k, pois, gaus, mult, vmf })
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn objective(&self, i: usize, c: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        if let Some(p) = &self.pois {
            for (n, (xi, psi)) in p.post.modes.iter().zip(&p.post.covs).enumerate() {
                let t = c.dot(xi);
                total += -clipped_exp(t + 0.5 * quad_form(psi, c)).0 + p.counts[(i, n)] * t;
            }
        }
        if let Some(g) = &self.gaus {
            let m = g.means.ncols() as f64;
            let fitted = g.means.transpose() * c;
            let resid: f64 = (0..g.values.ncols()).map(|j| (fitted[j] - g.values[(i, j)]).powi(2)).sum();
            total -= (m * quad_form(g.cov, c) + resid) / (2.0 * g.noise_var[i]);
        }
        if let Some(mt) = &self.mult {
            let l = mt.trials[i] as f64;
            if l > 0.0 {
                total += l * (-0.5 * quad_form(&mt.moment, c) + c.dot(&linalg::row_vector(&mt.linear, i)));
            }
        }
        if let Some(v) = &self.vmf {
            total += self.vmf_linear(v, i).dot(c);
        }
        total
    }

    fn vmf_linear(&self, v: &VmfTerms<'_>, i: usize) -> DVector<f64> {
        crate::vmf::loading_gradient(v.post, &v.coords[i], v.obj_conc[i])
    }

    /// Gradient and Hessian of [`Self::objective`], plus clipped-exponent count.
    pub fn derivatives(&self, i: usize, c: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, usize) {
        let k = self.factors;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        let mut clips = 0;
        if let Some(p) = &self.pois {
            for (n, (xi, psi)) in p.post.modes.iter().zip(&p.post.covs).enumerate() {
                let shift = xi + psi * c;
                let (e, clipped) = clipped_exp(c.dot(xi) + 0.5 * quad_form(psi, c));
                clips += clipped as usize;
                grad += xi * p.counts[(i, n)] - &shift * e;
                hess -= (&shift * shift.transpose() + psi) * e;
            }
        }
        if let Some(g) = &self.gaus {
            let s = g.noise_var[i];
            let target = g.means * g.values.row(i).transpose();
            grad -= (&g.curvature * c - target) / s;
            hess -= &g.curvature / s;
        }
        if let Some(mt) = &self.mult {
            let l = mt.trials[i] as f64;
            if l > 0.0 {
                grad += (linalg::row_vector(&mt.linear, i) - &mt.moment * c) * l;
                hess -= &mt.moment * l;
            }
        }
        if let Some(v) = &self.vmf {
            grad += self.vmf_linear(v, i);
        }
        (grad, linalg::symmetrize(&hess), clips)
    }

    /// Damped Newton ascent from `start`. Returns the best iterate even when
    /// the gradient tolerance is not reached.
    pub fn newton(&self, i: usize, start: &DVector<f64>, opts: &NewtonOptions) -> RowUpdate {
        let mut c = start.clone();
        let mut value = self.objective(i, &c);
        let mut iterations = 0;
        let mut fallback_steps = 0;
        let mut clip_events = 0;
        loop {
            let (grad, hess, clips) = self.derivatives(i, &c);
            clip_events += clips;
            let grad_norm = inf_norm(&grad);
            macro_rules! done {
                ($c:expr, $value:expr, $converged:expr) => {
                    RowUpdate {
                        row: $c,
                        objective: $value,
                        iterations,
                        grad_norm,
                        converged: $converged,
                        fallback_steps,
                        clip_events,
                    }
                };
            }
            if grad_norm < opts.grad_tol {
                return done!(c, value, true);
            }
            if iterations >= opts.max_iters {
                return done!(c, value, false);
            }
            iterations += 1;
            let (step, newton_step) = match linalg::cholesky(&(-&hess)) {
                Some(chol) => (chol.solve(&grad), true),
                None => {
                    fallback_steps += 1;
                    (&grad * FALLBACK_STEP, false)
                }
            };
            if newton_step && in_rounding_regime(&grad, &step, value) {
                c += &step;
                value = self.objective(i, &c);
                continue;
            }
            match backtrack(&c, &step, value, opts.max_halvings, |cand| self.objective(i, cand)) {
                Some((next, next_value, t)) => {
                    let stalled = t * inf_norm(&step) <= f64::EPSILON * (1.0 + inf_norm(&next));
                    c = next;
                    value = next_value;
                    if stalled {
                        let converged = grad_norm <= 1e-9 * (1.0 + value.abs());
                        return done!(c, value, converged);
                    }
                }
                None => {
                    let converged = grad_norm <= 1e-9 * (1.0 + value.abs());
                    return done!(c, value, converged);
                }
            }
        }
    }

    /// Solves every row independently, warm-started from `current`.
    pub fn sweep(&self, current: &DMatrix<f64>, opts: &NewtonOptions) -> (DMatrix<f64>, Vec<RowUpdate>) {
        let updates: Vec<RowUpdate> = (0..current.nrows())
            .into_par_iter()
            .map(|i| self.newton(i, &linalg::row_vector(current, i), opts))
            .collect();
        let mut next = current.clone();
        for (i, u) in updates.iter().enumerate() {
            next.set_row(i, &u.row.transpose());
        }
        (next, updates)
    }
}
