//! Held-out perplexity, choice of the factor count, and factor listings.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::driver::{em_fit, FitConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, Modality, ModelParams};
use crate::poisson::{self, NewtonOptions, ScorePrior};

/// Fraction of Poisson columns held out by [`select_k`].
pub const HELDOUT_FRACTION: f64 = 0.2;

/// Laplace approximation of `log P(y)` for one count column, including the
/// `log y!` terms.
pub fn log_evidence(
    y: &DVector<f64>,
    loadings: &DMatrix<f64>,
    prior: &ScorePrior,
    opts: &NewtonOptions,
) -> Result<f64> {
    let post = poisson::e_step_column(y, loadings, prior, &prior.mean, opts)?;
    let eta = loadings * &post.mode;
    let lik: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(&t, &yi)| yi * t - linalg::clipped_exp(t).0 - ln_gamma(yi + 1.0))
        .sum();
    // log N(mode | mode, Psi) = -K/2 log 2 pi - log|Psi| / 2; the 2 pi terms cancel
    Ok(lik + prior.log_kernel(&post.mode) - 0.5 * prior.log_det_cov + 0.5 * linalg::log_det_spd(&post.cov)?)
}

/// Per-count perplexity `exp(-sum_n log P(y_n) / total count)` of held-out
/// Poisson columns.
pub fn perplexity(params: &ModelParams, heldout: &DMatrix<f64>) -> Result<f64> {
    if heldout.nrows() != params.objects() {
        return Err(Error::Shape(format!(
            "held-out counts have {} rows, model has {} objects",
            heldout.nrows(),
            params.objects()
        )));
    }
    let total: f64 = heldout.sum();
    if heldout.ncols() == 0 || total.is_nan() || total <= 0.0 {
        return Err(Error::Invalid("held-out counts have zero total".into()));
    }
    let prior = ScorePrior::new(&params.pois_mean, &params.pois_cov)?;
    let opts = NewtonOptions::default();
    let mut log_p = 0.0;
    for col in heldout.column_iter() {
        log_p += log_evidence(&col.into_owned(), &params.loadings, &prior, &opts)?;
    }
    Ok((-log_p / total).exp())
}

/// Seeded train / held-out split of the Poisson column indices.
pub fn split_columns(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 Poisson columns to hold some out, have {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((n as f64 * HELDOUT_FRACTION).round() as usize).clamp(1, n - 1);
    let mut heldout = idx.split_off(n - held);
    idx.sort_unstable();
    heldout.sort_unstable();
    Ok((idx, heldout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub objective: f64,
}

/// Fits every `k` in `grid` on 80% of the Poisson columns and returns the one
/// with the lowest held-out perplexity, together with the full table.
pub fn select_k(dataset: &Dataset, grid: &[usize], config: &FitConfig) -> Result<(usize, Vec<KScore>)> {
    if grid.is_empty() {
        return Err(Error::Invalid("empty factor-count grid".into()));
    }
    if !dataset.has(Modality::Poisson) {
        return Err(Error::ModalityAbsent { modality: Modality::Poisson });
    }
    let (train, heldout) = split_columns(dataset.counts.ncols(), config.seed)?;
    let train_data = dataset.with_count_columns(&train);
    let heldout_counts = dataset.counts.select_columns(&heldout);
    let mut table = Vec::with_capacity(grid.len());
    for &k in grid {
        let cfg = FitConfig { factors: k, ..config.clone() };
        let fit = em_fit(&train_data, &cfg)?;
        let p = perplexity(&fit.params, &heldout_counts)?;
        log::info!("K = {k}: held-out perplexity {p:.6}");
        table.push(KScore {
            k,
            perplexity: p,
            iterations: fit.trace.len(),
            objective: fit.trace.last().map_or(f64::NAN, |r| r.objective),
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| a.perplexity.total_cmp(&b.perplexity))
        .map(|r| r.k)
        .expect("nonempty grid");
    Ok((best, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedObject {
    pub rank: usize,
    pub object_id: String,
    pub loading: f64,
    pub mean_count: f64,
}

/// Objects ranked by `|C_ij|` for the 1-based factor `j`; ties go to the
/// lower object index.
pub fn rank_objects(
    loadings: &DMatrix<f64>,
    object_ids: &[String],
    mean_counts: &[f64],
    j: usize,
    top: usize,
) -> Result<Vec<RankedObject>> {
    let k = loadings.ncols();
    if j == 0 || j > k {
        return Err(Error::Invalid(format!("factor {j} out of range 1..={k}")));
    }
    let p = loadings.nrows();
    if object_ids.len() != p || mean_counts.len() != p {
        return Err(Error::Shape(format!(
            "{p} loading rows, {} object ids, {} mean counts",
            object_ids.len(),
            mean_counts.len()
        )));
    }
    let col = loadings.column(j - 1);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| col[b].abs().total_cmp(&col[a].abs()).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(top)
        .enumerate()
        .map(|(r, i)| RankedObject {
            rank: r + 1,
            object_id: object_ids[i].clone(),
            loading: col[i],
            mean_count: mean_counts[i],
        })
        .collect())
}

pub fn top_objects_per_factor(
    params: &ModelParams,
    dataset: &Dataset,
    j: usize,
    top: usize,
) -> Result<Vec<RankedObject>> {
    rank_objects(&params.loadings, &dataset.object_ids, &dataset.mean_counts(), j, top)
}
