//! Multinomial modality under the last-category pivot.
//!
//! The log-sum-exp normalizer is replaced by Böhning's fixed-curvature
//! quadratic upper bound, which turns each object's counts into a Gaussian
//! pseudo-observation with precision `L_i A`. The joint posterior over the
//! stacked scores `u = [u_1; ...; u_{D-1}]` is then Gaussian.
//!
//! Its precision is `A ⊗ G + I ⊗ Q^{-1}` with `G = sum_i L_i c_i c_i^T`.
//! `A = (I - 11^T/D)/2` has eigenvalue `1/(2D)` along `1` and `1/2` on the
//! complement, so the covariance splits into two K x K pieces:
//!
//! `Phi = (I - 11^T/(D-1)) ⊗ (G/2 + Q^{-1})^{-1} + 11^T/(D-1) ⊗ (G/(2D) + Q^{-1})^{-1}`
//!
//! and is never materialized as a `(D-1)K` square matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, quad_form};
use crate::model::Modality;

/// `log(1 + sum_l exp(eta_l))`: log-sum-exp including the pivot's `e^0`.
pub fn lse(eta: &DVector<f64>) -> f64 {
    let shift = eta.iter().copied().fold(0.0_f64, f64::max);
    let sum: f64 = (-shift).exp() + eta.iter().map(|&e| (e - shift).exp()).sum::<f64>();
    shift + sum.ln()
}

/// Probabilities of the non-pivot categories, i.e. the gradient of [`lse`].
pub fn softmax(eta: &DVector<f64>) -> DVector<f64> {
    let shift = eta.iter().copied().fold(0.0_f64, f64::max);
    let denom: f64 = (-shift).exp() + eta.iter().map(|&e| (e - shift).exp()).sum::<f64>();
    eta.map(|e| (e - shift).exp() / denom)
}

/// Böhning curvature `A = (I - 11^T/D) / 2` of size `(D-1) x (D-1)`.
pub fn curvature(categories: usize) -> DMatrix<f64> {
    let n = categories - 1;
    let d = categories as f64;
    DMatrix::from_fn(n, n, |r, c| 0.5 * (f64::from(u8::from(r == c)) - 1.0 / d))
}

/// `A^{-1} = 2 (I + 11^T)`.
pub fn curvature_inverse(categories: usize) -> DMatrix<f64> {
    let n = categories - 1;
    DMatrix::from_fn(n, n, |r, c| 2.0 * (f64::from(u8::from(r == c)) + 1.0))
}

/// Quadratic upper bound `eta^T A eta / 2 - b^T eta + c >= lse(eta)`,
/// tight at the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct BohningBound {
    pub curvature: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub offset: f64,
}

impl BohningBound {
    pub fn at(anchor: &DVector<f64>) -> Self {
        let a = curvature(anchor.len() + 1);
        let p = softmax(anchor);
        let a_anchor = &a * anchor;
        let offset = lse(anchor) + 0.5 * anchor.dot(&a_anchor) - p.dot(anchor);
        Self {
            linear: a_anchor - p,
            curvature: a,
            offset,
        }
    }

    pub fn value(&self, eta: &DVector<f64>) -> f64 {
        0.5 * quad_form(&self.curvature, eta) - self.linear.dot(eta) + self.offset
    }
}

/// Covariance of the stacked multinomial scores, indexed by K x K blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum StackedCovariance {
    /// Arbitrary `(D-1)K` square covariance.
    Dense { cov: DMatrix<f64>, factors: usize },
    /// `(I - 11^T/n) ⊗ spread + 11^T/n ⊗ common`, `n = D - 1` blocks.
    Kronecker {
        blocks: usize,
        spread: DMatrix<f64>,
        common: DMatrix<f64>,
    },
}

impl StackedCovariance {
    pub fn blocks(&self) -> usize {
        match self {
            StackedCovariance::Dense { cov, factors } => cov.nrows() / factors,
            StackedCovariance::Kronecker { blocks, .. } => *blocks,
        }
    }

    pub fn factors(&self) -> usize {
        match self {
            StackedCovariance::Dense { factors, .. } => *factors,
            StackedCovariance::Kronecker { spread, .. } => spread.nrows(),
        }
    }

    /// The `(d, e)` K x K block.
    pub fn block(&self, d: usize, e: usize) -> DMatrix<f64> {
        match self {
            StackedCovariance::Dense { cov, factors } => {
                cov.view((d * factors, e * factors), (*factors, *factors)).into_owned()
            }
            StackedCovariance::Kronecker { blocks, spread, common } => {
                let n = *blocks as f64;
                let w = if d == e { 1.0 - 1.0 / n } else { -1.0 / n };
                spread * w + common / n
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            StackedCovariance::Dense { cov, .. } => cov.clone(),
            StackedCovariance::Kronecker { .. } => {
                let (n, k) = (self.blocks(), self.factors());
                let mut out = DMatrix::zeros(n * k, n * k);
                for d in 0..n {
                    for e in 0..n {
                        out.view_mut((d * k, e * k), (k, k)).copy_from(&self.block(d, e));
                    }
                }
                out
            }
        }
    }

    /// Sum of the diagonal blocks.
    pub fn diagonal_block_sum(&self) -> DMatrix<f64> {
        match self {
            StackedCovariance::Kronecker { blocks, spread, common } => {
                spread * (*blocks as f64 - 1.0) + common
            }
            StackedCovariance::Dense { .. } => {
                let k = self.factors();
                (0..self.blocks()).fold(DMatrix::zeros(k, k), |acc, d| acc + self.block(d, d))
            }
        }
    }

    pub fn log_det(&self) -> Result<f64> {
        match self {
            StackedCovariance::Dense { cov, .. } => linalg::log_det_spd(cov),
            StackedCovariance::Kronecker { blocks, spread, common } => {
                let rest = if *blocks > 1 {
                    (*blocks - 1) as f64 * linalg::log_det_spd(spread)?
                } else {
                    0.0
                };
                Ok(rest + linalg::log_det_spd(common)?)
            }
        }
    }

    /// `sum_{d,e} A_{de} Cov_{ed}` for the Böhning curvature of `blocks + 1` categories.
    fn curvature_contraction(&self) -> DMatrix<f64> {
        let n = self.blocks();
        let categories = (n + 1) as f64;
        match self {
            StackedCovariance::Kronecker { spread, common, .. } => {
                spread * ((categories - 2.0) / 2.0) + common / (2.0 * categories)
            }
            StackedCovariance::Dense { .. } => {
                let a = curvature(n + 1);
                let k = self.factors();
                let mut out = DMatrix::zeros(k, k);
                for d in 0..n {
                    for e in 0..n {
                        out += self.block(e, d) * a[(d, e)];
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialPosterior {
    /// Stacked posterior mean, block `d` holding `u_d`.
    pub mean: DVector<f64>,
    pub cov: StackedCovariance,
    /// P x (D-1) bound anchors used for this posterior.
    pub anchors: DMatrix<f64>,
    /// P x (D-1) Gaussian pseudo-observations.
    pub pseudo_obs: DMatrix<f64>,
}

impl MultinomialPosterior {
    /// K x (D-1) matrix whose column `d` is the mean of `u_d`.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let k = self.cov.factors();
        DMatrix::from_column_slice(k, self.mean.len() / k, self.mean.as_slice())
    }

    /// `sum_{d,e} A_{de} (Phi_{ed} + phi_e phi_d^T)`, so that
    /// `E[eta_i^T A eta_i] = c_i^T U c_i`.
    pub fn curvature_moment(&self) -> DMatrix<f64> {
        let f = self.mean_matrix();
        let a = curvature(f.ncols() + 1);
        linalg::symmetrize(&(self.cov.curvature_contraction() + &f * a * f.transpose()))
    }
}

/// Pseudo-observations `A^{-1}(h_i/L_i - p(gamma_i)) + gamma_i` for every
/// object. Rows of objects without trials are set to their anchor.
pub fn pseudo_observations(
    categories: &DMatrix<f64>,
    trials: &[u64],
    anchors: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = categories.ncols();
    let a_inv = curvature_inverse(d);
    let mut out = anchors.clone();
    for (i, &l) in trials.iter().enumerate().take(categories.nrows()) {
        if l == 0 {
            continue;
        }
        let gamma = linalg::row_vector(anchors, i);
        let freq = categories.view((i, 0), (1, d - 1)).transpose() / l as f64;
        let h = &a_inv * (freq - softmax(&gamma)) + gamma;
        out.set_row(i, &h.transpose());
    }
    out
}

fn check(categories: &DMatrix<f64>, trials: &[u64], loadings: &DMatrix<f64>, anchors: &DMatrix<f64>) -> Result<()> {
    let (p, d) = (categories.nrows(), categories.ncols());
    if d < 2 {
        return Err(Error::ModalityAbsent { modality: Modality::Multinomial });
    }
    if trials.len() != p || loadings.nrows() != p || anchors.nrows() != p || anchors.ncols() != d - 1 {
        return Err(Error::Shape(format!(
            "multinomial inputs: {p}x{d} counts, {} trials, {} loading rows, {}x{} anchors",
            trials.len(),
            loadings.nrows(),
            anchors.nrows(),
            anchors.ncols()
        )));
    }
    Ok(())
}

/// Gaussian posterior of the stacked pivoted scores under the bound
/// anchored at `anchors`.
pub fn e_step(
    categories: &DMatrix<f64>,
    trials: &[u64],
    loadings: &DMatrix<f64>,
    prior_cov: &DMatrix<f64>,
    anchors: &DMatrix<f64>,
) -> Result<MultinomialPosterior> {
    check(categories, trials, loadings, anchors)?;
    let (p, d, k) = (categories.nrows(), categories.ncols(), loadings.ncols());
    let n = d - 1;
    let pseudo_obs = pseudo_observations(categories, trials, anchors);

    let weights = DVector::from_iterator(p, trials.iter().map(|&l| l as f64));
    let gram = crate::poisson::weighted_gram(loadings, &weights);
    let prior_precision = linalg::spd_inverse_jittered(prior_cov)?;
    let spread = linalg::spd_inverse_jittered(&(&gram * 0.5 + &prior_precision))?;
    let common = linalg::spd_inverse_jittered(&(&gram / (2.0 * d as f64) + &prior_precision))?;

    // r_d = sum_i L_i c_i (A h~_i)_d, as a K x (D-1) matrix
    let a = curvature(d);
    let a_h = &pseudo_obs * &a; // rows are (A h~_i)^T
    let mut weighted = loadings.transpose();
    for (i, mut col) in weighted.column_iter_mut().enumerate() {
        col *= weights[i];
    }
    let r = weighted * a_h;
    let r_mean = r.column_sum() / n as f64;
    let mut f = &spread * (&r - DMatrix::from_fn(k, n, |row, _| r_mean[row]));
    let common_part = &common * &r_mean;
    for mut col in f.column_iter_mut() {
        col += &common_part;
    }

    Ok(MultinomialPosterior {
        mean: DVector::from_column_slice(f.as_slice()),
        cov: StackedCovariance::Kronecker { blocks: n, spread, common },
        anchors: anchors.clone(),
        pseudo_obs,
    })
}

/// `Q' = (1/(D-1)) sum_d (Phi_dd + phi_d phi_d^T)`.
pub fn m_step(mean: &DVector<f64>, cov: &StackedCovariance) -> Result<DMatrix<f64>> {
    let (n, k) = (cov.blocks(), cov.factors());
    if mean.len() != n * k {
        return Err(Error::Shape(format!(
            "stacked mean of length {} for {n} blocks of size {k}",
            mean.len()
        )));
    }
    let mut q = cov.diagonal_block_sum();
    for d in 0..n {
        let phi_d = mean.rows(d * k, k);
        q += phi_d * phi_d.transpose();
    }
    linalg::ensure_spd(&(q / n as f64))
}

/// Optimal anchors for the current posterior mean: `gamma_id = c_i^T phi_d`.
pub fn update_anchors(mean: &DVector<f64>, loadings: &DMatrix<f64>) -> DMatrix<f64> {
    let k = loadings.ncols();
    let f = DMatrix::from_column_slice(k, mean.len() / k, mean.as_slice());
    loadings * f
}

/// Lower bound on the expected complete-data log-likelihood of the
/// multinomial modality (multinomial coefficients and `2 pi` constants
/// dropped).
pub fn expected_cll_lb(
    post: &MultinomialPosterior,
    loadings: &DMatrix<f64>,
    prior_cov: &DMatrix<f64>,
    trials: &[u64],
) -> Result<f64> {
    let n = post.cov.blocks();
    let d = n + 1;
    let a = curvature(d);
    let f = post.mean_matrix();
    let u = post.curvature_moment();
    let mut total = 0.0;
    for (i, &l) in trials.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let c = linalg::row_vector(loadings, i);
        let mu = f.transpose() * &c;
        let h = linalg::row_vector(&post.pseudo_obs, i);
        let bound = BohningBound::at(&linalg::row_vector(&post.anchors, i));
        total += l as f64 * (-0.5 * quad_form(&u, &c) + (&a * h).dot(&mu) - bound.offset);
    }
    let precision = linalg::spd_inverse(prior_cov)?;
    let second = post.cov.diagonal_block_sum() + &f * f.transpose();
    total -= 0.5 * linalg::trace_of_product(&precision, &second);
    total -= 0.5 * n as f64 * linalg::log_det_spd(prior_cov)?;
    Ok(total)
}
