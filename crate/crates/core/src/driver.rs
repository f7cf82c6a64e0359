//! EM orchestration across the active modalities.
//!
//! One iteration runs every E-step against the current parameters, then the
//! prior-parameter M-steps, refreshes the multinomial bound anchors, and
//! finally sweeps the loading rows. The recorded objective is the free
//! energy: each modality's expected complete-data log-likelihood (or its
//! lower bound) plus the entropy of its Gaussian posterior. For the
//! Gaussian modality this equals the marginal log-likelihood whenever the
//! posterior is exact.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian;
use crate::linalg;
use crate::loadings::LoadingProblem;
use crate::model::{self, Dataset, Modality, ModelParams, PosteriorState};
use crate::multinomial;
use crate::poisson::{self, NewtonOptions, ScorePrior};
use crate::vmf;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub factors: usize,
    pub max_iters: usize,
    /// Relative objective change `|delta| / (1 + |objective|)` that stops the fit.
    pub tol: f64,
    pub seed: u64,
    /// Modalities to fit; `None` fits everything the dataset has, preferring
    /// vMF over Gaussian when both are present.
    pub modalities: Option<BTreeSet<Modality>>,
    pub newton: NewtonOptions,
}

impl FitConfig {
    pub fn new(factors: usize) -> Self {
        Self {
            factors,
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            modalities: None,
            newton: NewtonOptions::default(),
        }
    }

    pub fn with_modalities(mut self, modalities: &[Modality]) -> Self {
        self.modalities = Some(modalities.iter().copied().collect());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// Resolves and checks the set of modalities to fit.
pub fn active_modalities(dataset: &Dataset, config: &FitConfig) -> Result<BTreeSet<Modality>> {
    let active = match &config.modalities {
        Some(requested) => {
            for &m in requested {
                if !dataset.has(m) {
                    return Err(Error::ModalityAbsent { modality: m });
                }
            }
            requested.clone()
        }
        None => {
            let mut all: BTreeSet<Modality> = [
                Modality::Poisson,
                Modality::Gaussian,
                Modality::Multinomial,
                Modality::Vmf,
            ]
            .into_iter()
            .filter(|&m| dataset.has(m))
            .collect();
            if all.contains(&Modality::Vmf) {
                all.remove(&Modality::Gaussian);
            }
            all
        }
    };
    if active.contains(&Modality::Gaussian) && active.contains(&Modality::Vmf) {
        return Err(Error::Invalid(
            "the Gaussian and vMF modalities are mutually exclusive within one fit".into(),
        ));
    }
    if active.is_empty() {
        return Err(Error::Invalid("no modality to fit".into()));
    }
    Ok(active)
}

/// Objective terms recorded after one EM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub pois: Option<f64>,
    pub gaus: Option<f64>,
    pub mult: Option<f64>,
    pub vmf: Option<f64>,
    /// Seconds spent in this iteration.
    pub wall_time: f64,
}

impl TraceRow {
    /// Every column except the wall time.
    pub fn numeric_eq(&self, other: &TraceRow) -> bool {
        let bits = |v: Option<f64>| v.map(f64::to_bits);
        self.iteration == other.iteration
            && self.objective.to_bits() == other.objective.to_bits()
            && bits(self.pois) == bits(other.pois)
            && bits(self.gaus) == bits(other.gaus)
            && bits(self.mult) == bits(other.mult)
            && bits(self.vmf) == bits(other.vmf)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Exponent arguments clipped to avoid overflow.
    pub clip_events: usize,
    pub vmf_fallbacks: usize,
    pub vmf_cancelled: usize,
    /// Loading rows whose Newton solve stopped short of the gradient tolerance.
    pub loading_nonconverged: usize,
    pub loading_fallback_steps: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub diagnostics: Diagnostics,
    pub posterior: PosteriorState,
    pub modalities: BTreeSet<Modality>,
}

/// Step-by-step EM state.
pub struct Fitter<'a> {
    dataset: &'a Dataset,
    config: FitConfig,
    active: BTreeSet<Modality>,
    params: ModelParams,
    posterior: PosteriorState,
    anchors: Option<DMatrix<f64>>,
    trace: Vec<TraceRow>,
    diagnostics: Diagnostics,
}

fn stage<T>(iteration: usize, module: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Fit { iteration, module, source: Box::new(e), partial_trace: Vec::new() })
}

fn gaussian_entropy(dim: usize, log_det: f64) -> f64 {
    0.5 * (dim as f64 * (1.0 + (2.0 * PI).ln()) + log_det)
}

impl<'a> Fitter<'a> {
    pub fn new(dataset: &'a Dataset, config: FitConfig) -> Result<Self> {
        let params = model::init_params(&dataset.dims(config.factors), config.seed);
        Self::with_params(dataset, config, params)
    }

    pub fn with_params(dataset: &'a Dataset, config: FitConfig, params: ModelParams) -> Result<Self> {
        let report = model::validate(dataset, &params);
        if let Some(first) = report.first() {
            return Err(Error::Invalid(format!(
                "{first}{}",
                if report.len() > 1 { format!(" (and {} more)", report.len() - 1) } else { String::new() }
            )));
        }
        if params.factors() != config.factors {
            return Err(Error::Shape(format!(
                "parameters have {} factors, config asks for {}",
                params.factors(),
                config.factors
            )));
        }
        let active = active_modalities(dataset, &config)?;
        dataset.dims(config.factors).warn_if_overparameterized();
        let anchors = active.contains(&Modality::Multinomial).then(|| {
            DMatrix::zeros(dataset.objects(), dataset.categories.ncols() - 1)
        });
        Ok(Self {
            dataset,
            config,
            active,
            params,
            posterior: PosteriorState::default(),
            anchors,
            trace: Vec::new(),
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn posterior(&self) -> &PosteriorState {
        &self.posterior
    }

    pub fn active(&self) -> &BTreeSet<Modality> {
        &self.active
    }

    /// Runs one full EM iteration and returns its trace row.
    pub fn step(&mut self) -> Result<TraceRow> {
        let it = self.trace.len() + 1;
        let start = Instant::now();
        let data = self.dataset;
        let opts = self.config.newton;
        let mut post = PosteriorState::default();
        let mut next = self.params.clone();

        // E-steps against the current parameters.
        if self.active.contains(&Modality::Poisson) {
            let prior = stage(it, "poisson", ScorePrior::new(&self.params.pois_mean, &self.params.pois_cov))?;
            let (p, clips) = stage(
                it,
                "poisson",
                poisson::e_step(&data.counts, &self.params.loadings, &prior, self.posterior.pois.as_ref(), &opts),
            )?;
            self.diagnostics.clip_events += clips;
            post.pois = Some(p);
        }
        if self.active.contains(&Modality::Gaussian) {
            let p = &self.params;
            post.gaus = Some(stage(
                it,
                "gaussian",
                gaussian::e_step(&data.values, &p.loadings, &p.noise_var, &p.gaus_mean, &p.gaus_cov),
            )?);
        }
        if self.active.contains(&Modality::Vmf) {
            let p = &self.params;
            let coords = data.coords.as_deref().unwrap_or_default();
            let v = stage(
                it,
                "vmf",
                vmf::e_step(coords, &p.loadings, &p.vmf_mean_dirs, &p.vmf_prior_conc, &p.vmf_obj_conc),
            )?;
            self.diagnostics.vmf_fallbacks += v.fallbacks;
            post.vmf = Some(v);
        }
        if let Some(anchors) = &self.anchors {
            post.mult = Some(stage(
                it,
                "multinomial",
                multinomial::e_step(&data.categories, &data.trials, &self.params.loadings, &self.params.mult_cov, anchors),
            )?);
        }

        // Prior-parameter M-steps.
        if let Some(p) = &post.pois {
            let (mean, cov) = stage(it, "poisson", poisson::m_step(p))?;
            next.pois_mean = mean;
            next.pois_cov = cov;
        }
        if let Some(g) = &post.gaus {
            let (alpha, s, noise) = stage(it, "gaussian", gaussian::m_step(g, &data.values, &self.params.loadings))?;
            next.gaus_mean = alpha;
            next.gaus_cov = s;
            next.noise_var = noise;
        }
        if let Some(v) = &post.vmf {
            let coords = data.coords.as_deref().unwrap_or_default();
            let p = &self.params;
            let upd = stage(it, "vmf", vmf::m_step(v, coords, (&p.vmf_mean_dirs, &p.vmf_prior_conc, &p.vmf_obj_conc)))?;
            self.diagnostics.vmf_cancelled += upd.cancelled.len();
            next.vmf_mean_dirs = upd.mean_dirs;
            next.vmf_prior_conc = upd.prior_conc;
            next.vmf_obj_conc = upd.obj_conc;
        }
        if let Some(m) = post.mult.as_mut() {
            next.mult_cov = stage(it, "multinomial", multinomial::m_step(&m.mean, &m.cov))?;
            let anchors = multinomial::update_anchors(&m.mean, &self.params.loadings);
            m.pseudo_obs = multinomial::pseudo_observations(&data.categories, &data.trials, &anchors);
            m.anchors = anchors.clone();
            self.anchors = Some(anchors);
        }

        // Loadings sweep.
        let problem = stage(it, "loadings", LoadingProblem::new(data, &next, &post))?;
        let (loadings, rows) = problem.sweep(&self.params.loadings, &opts);
        for r in &rows {
            self.diagnostics.clip_events += r.clip_events;
            self.diagnostics.loading_fallback_steps += r.fallback_steps;
            self.diagnostics.loading_nonconverged += usize::from(!r.converged);
        }
        next.loadings = loadings;

        let mut row = stage(it, "objective", free_energy(data, &next, &post))?;
        row.iteration = it;
        row.wall_time = start.elapsed().as_secs_f64();
        if !row.objective.is_finite() {
            return Err(Error::Fit {
                iteration: it,
                module: "objective",
                source: Box::new(Error::Factorization("objective is not finite".into())),
                partial_trace: Vec::new(),
            });
        }
        self.params = next;
        self.posterior = post;
        self.trace.push(row.clone());
        self.diagnostics.iterations = it;
        Ok(row)
    }

    /// Iterates until the relative objective change drops below the
    /// tolerance or `max_iters` is reached. A failing iteration returns
    /// [`Error::Fit`] carrying the rows completed so far.
    pub fn run(mut self) -> Result<FitResult> {
        while self.trace.len() < self.config.max_iters {
            let prev = self.trace.last().map(|r| r.objective);
            let row = match self.step() {
                Ok(row) => row,
                Err(Error::Fit { iteration, module, source, .. }) => {
                    return Err(Error::Fit { iteration, module, source, partial_trace: self.trace });
                }
                Err(e) => return Err(e),
            };
            if let Some(prev) = prev {
                if (row.objective - prev).abs() / (1.0 + row.objective.abs()) < self.config.tol {
                    self.diagnostics.converged = true;
                    break;
                }
            }
        }
        Ok(FitResult {
            params: self.params,
            trace: self.trace,
            diagnostics: self.diagnostics,
            posterior: self.posterior,
            modalities: self.active,
        })
    }
}

/// Free energy of the parameters under the given posteriors, split by modality.
pub fn free_energy(data: &Dataset, params: &ModelParams, post: &PosteriorState) -> Result<TraceRow> {
    let k = params.factors();
    let mut row = TraceRow {
        iteration: 0,
        objective: 0.0,
        pois: None,
        gaus: None,
        mult: None,
        vmf: None,
        wall_time: 0.0,
    };
    if let Some(p) = &post.pois {
        let prior = ScorePrior::new(&params.pois_mean, &params.pois_cov)?;
        let mut v = poisson::expected_cll(p, &data.counts, &params.loadings, &prior);
        for psi in &p.covs {
            v += gaussian_entropy(k, linalg::log_det_spd(psi)?);
        }
        row.pois = Some(v);
    }
    if let Some(g) = &post.gaus {
        let v = gaussian::expected_cll(g, &data.values, &params.loadings, &params.noise_var, &params.gaus_mean, &params.gaus_cov)?
            + g.means.ncols() as f64 * gaussian_entropy(k, linalg::log_det_spd(&g.cov)?);
        row.gaus = Some(v);
    }
    if let Some(m) = &post.mult {
        let v = multinomial::expected_cll_lb(m, &params.loadings, &params.mult_cov, &data.trials)?
            + gaussian_entropy(m.mean.len(), m.cov.log_det()?);
        row.mult = Some(v);
    }
    if let Some(v) = &post.vmf {
        let coords = data.coords.as_deref().unwrap_or_default();
        row.vmf = Some(vmf::expected_cll(
            v,
            coords,
            &params.loadings,
            &params.vmf_mean_dirs,
            &params.vmf_prior_conc,
            &params.vmf_obj_conc,
        ));
    }
    row.objective = [row.pois, row.gaus, row.mult, row.vmf].iter().flatten().sum();
    Ok(row)
}

/// Fits the model by EM from [`model::init_params`].
pub fn em_fit(dataset: &Dataset, config: &FitConfig) -> Result<FitResult> {
    Fitter::new(dataset, config.clone())?.run()
}
