//! Shared domain types: dimensions, the observation matrices, model
//! parameters, posterior state, validation and parameter initialization.

use std::fmt;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::gaussian::GaussianPosterior;
use crate::linalg;
use crate::multinomial::MultinomialPosterior;
use crate::poisson::PoissonPosterior;
use crate::vmf::VmfPosterior;

/// Standard deviation of the initial factor loadings.
pub const INIT_LOADING_SCALE: f64 = 0.1;

const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Poisson,
    Gaussian,
    Multinomial,
    Vmf,
}

impl Modality {
    pub fn short_name(self) -> &'static str {
        match self {
            Modality::Poisson => "pois",
            Modality::Gaussian => "gaus",
            Modality::Multinomial => "mult",
            Modality::Vmf => "vmf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pois" | "poisson" => Some(Modality::Poisson),
            "gaus" | "gauss" | "gaussian" => Some(Modality::Gaussian),
            "mult" | "multinomial" => Some(Modality::Multinomial),
            "vmf" => Some(Modality::Vmf),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimensions {
    /// Number of objects (rows shared by every modality).
    pub objects: usize,
    pub count_columns: usize,
    pub value_columns: usize,
    pub categories: usize,
    pub factors: usize,
    /// Multinomial trial count per object.
    pub trials: Vec<u64>,
}

impl Dimensions {
    /// Dimensions with no multinomial trials recorded.
    pub fn new(
        objects: usize,
        count_columns: usize,
        value_columns: usize,
        categories: usize,
        factors: usize,
    ) -> Self {
        Self {
            objects,
            count_columns,
            value_columns,
            categories,
            factors,
            trials: vec![0; objects],
        }
    }

    /// Structural checks; returns a description of each violated invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.objects == 0 {
            out.push("object count must be at least 1".to_string());
        }
        if self.factors == 0 {
            out.push("factor count must be at least 1".to_string());
        }
        if self.categories == 1 {
            out.push("category count must be at least 2 when the multinomial modality is present".to_string());
        }
        if self.trials.len() != self.objects {
            out.push(format!(
                "trial vector has length {} but there are {} objects",
                self.trials.len(),
                self.objects
            ));
        }
        out
    }

    /// Logs a warning when K exceeds the observation dimension of a present modality.
    pub fn warn_if_overparameterized(&self) {
        let limits = [
            (Modality::Poisson, self.count_columns),
            (Modality::Gaussian, self.value_columns),
            (Modality::Multinomial, self.categories.saturating_sub(1)),
        ];
        for (modality, dim) in limits {
            if dim > 0 && self.factors > dim {
                log::warn!(
                    "K = {} exceeds the {} observation dimension {}",
                    self.factors,
                    modality,
                    dim
                );
            }
        }
    }
}

/// Observations for `P` objects. Absent modalities have zero columns
/// (or `coords == None`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub object_ids: Vec<String>,
    /// P x N event counts.
    pub counts: DMatrix<f64>,
    /// P x M continuous observations.
    pub values: DMatrix<f64>,
    /// P x D category counts.
    pub categories: DMatrix<f64>,
    /// Per-object multinomial trial counts; equal to the row sums of `categories`.
    pub trials: Vec<u64>,
    /// Per-object unit 3-vectors (spherical coordinates).
    pub coords: Option<Vec<Vec<Vector3<f64>>>>,
}

impl Dataset {
    /// Builds a dataset, deriving trial counts from the category rows and
    /// naming objects `0..P` when no ids are supplied.
    pub fn new(
        counts: DMatrix<f64>,
        values: DMatrix<f64>,
        categories: DMatrix<f64>,
        coords: Option<Vec<Vec<Vector3<f64>>>>,
    ) -> Self {
        let p = counts.nrows().max(values.nrows()).max(categories.nrows());
        let p = coords.as_ref().map_or(p, |c| p.max(c.len()));
        let fix = |m: DMatrix<f64>| {
            if m.ncols() == 0 {
                DMatrix::zeros(p, 0)
            } else {
                m
            }
        };
        let categories = fix(categories);
        let trials = (0..categories.nrows())
            .map(|i| categories.row(i).sum().round().max(0.0) as u64)
            .collect();
        Self {
            object_ids: (0..p).map(|i| i.to_string()).collect(),
            counts: fix(counts),
            values: fix(values),
            categories,
            trials,
            coords,
        }
    }

    pub fn objects(&self) -> usize {
        self.object_ids.len()
    }

    pub fn has(&self, modality: Modality) -> bool {
        match modality {
            Modality::Poisson => self.counts.ncols() > 0,
            Modality::Gaussian => self.values.ncols() > 0,
            Modality::Multinomial => {
                self.categories.ncols() >= 2 && self.trials.iter().any(|&l| l > 0)
            }
            Modality::Vmf => self
                .coords
                .as_ref()
                .is_some_and(|c| c.iter().any(|v| !v.is_empty())),
        }
    }

    pub fn dims(&self, factors: usize) -> Dimensions {
        Dimensions {
            objects: self.objects(),
            count_columns: self.counts.ncols(),
            value_columns: self.values.ncols(),
            categories: self.categories.ncols(),
            factors,
            trials: self.trials.clone(),
        }
    }

    /// The same dataset restricted to a subset of Poisson columns.
    pub fn with_count_columns(&self, columns: &[usize]) -> Dataset {
        let mut out = self.clone();
        out.counts = self.counts.select_columns(columns);
        out
    }

    /// Mean Poisson count per object (zero when the modality is absent).
    pub fn mean_counts(&self) -> Vec<f64> {
        let n = self.counts.ncols();
        (0..self.objects())
            .map(|i| {
                if n == 0 {
                    0.0
                } else {
                    self.counts.row(i).sum() / n as f64
                }
            })
            .collect()
    }
}

/// All model parameters. The multinomial prior mean is not stored: the
/// pivot parameterization makes it unnecessary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// P x K factor loadings, one row per object.
    pub loadings: DMatrix<f64>,
    /// Poisson score prior mean.
    pub pois_mean: DVector<f64>,
    /// Poisson score prior covariance.
    pub pois_cov: DMatrix<f64>,
    /// Gaussian score prior mean.
    pub gaus_mean: DVector<f64>,
    /// Gaussian score prior covariance.
    pub gaus_cov: DMatrix<f64>,
    /// Per-object Gaussian noise variances.
    pub noise_var: DVector<f64>,
    /// Multinomial (pivoted) score prior covariance.
    pub mult_cov: DMatrix<f64>,
    /// Prior mean direction of each factor's vMF scores.
    pub vmf_mean_dirs: Vec<Vector3<f64>>,
    /// Prior concentration of each factor's vMF scores.
    pub vmf_prior_conc: DVector<f64>,
    /// Per-object vMF observation concentration.
    pub vmf_obj_conc: DVector<f64>,
}

impl ModelParams {
    pub fn objects(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn factors(&self) -> usize {
        self.loadings.ncols()
    }
}

/// Posterior summaries for every active modality from one E-step.
#[derive(Debug, Clone, Default)]
pub struct PosteriorState {
    pub pois: Option<PoissonPosterior>,
    pub gaus: Option<GaussianPosterior>,
    pub mult: Option<MultinomialPosterior>,
    pub vmf: Option<VmfPosterior>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Dimensions(String),
    Shape(String),
    NegativeOrNonFinite { matrix: &'static str, row: usize, col: usize, value: f64 },
    TrialMismatch { object: usize, row_sum: f64, trials: u64 },
    NotUnitNorm { what: String, norm: f64 },
    NotSpd(&'static str),
    NotPositive { field: &'static str, index: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimensions(msg) | Violation::Shape(msg) => f.write_str(msg),
            Violation::NegativeOrNonFinite { matrix, row, col, value } => {
                write!(f, "{matrix}[{row},{col}] = {value} is negative or not finite")
            }
            Violation::TrialMismatch { object, row_sum, trials } => write!(
                f,
                "object {object}: category counts sum to {row_sum} but trial count is {trials}"
            ),
            Violation::NotUnitNorm { what, norm } => write!(f, "{what} has norm {norm}, expected 1"),
            Violation::NotSpd(name) => write!(f, "{name} not SPD"),
            Violation::NotPositive { field, index, value } => {
                write!(f, "{field}[{index}] = {value} must be strictly positive")
            }
        }
    }
}

fn check_nonnegative(name: &'static str, m: &DMatrix<f64>, out: &mut Vec<Violation>) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if !v.is_finite() || v < 0.0 {
                out.push(Violation::NegativeOrNonFinite { matrix: name, row: i, col: j, value: v });
            }
        }
    }
}

fn check_positive(field: &'static str, v: &DVector<f64>, out: &mut Vec<Violation>) {
    for (i, &x) in v.iter().enumerate() {
        if !(x > 0.0 && x.is_finite()) {
            out.push(Violation::NotPositive { field, index: i, value: x });
        }
    }
}

fn check_square(name: &'static str, m: &DMatrix<f64>, k: usize, out: &mut Vec<Violation>) {
    if m.nrows() != k || m.ncols() != k {
        out.push(Violation::Shape(format!(
            "{name} is {}x{}, expected {k}x{k}",
            m.nrows(),
            m.ncols()
        )));
    } else if !linalg::is_spd(m) {
        out.push(Violation::NotSpd(name));
    }
}

/// Lists every violated dataset or parameter invariant. Empty means valid.
pub fn validate(dataset: &Dataset, params: &ModelParams) -> Vec<Violation> {
    let mut out = validate_dataset(dataset);
    out.extend(validate_params(params));
    let p = dataset.objects();
    if params.objects() != p {
        out.push(Violation::Shape(format!(
            "loadings have {} rows but the dataset has {p} objects",
            params.objects()
        )));
    }
    if params.noise_var.len() != p || params.vmf_obj_conc.len() != p {
        out.push(Violation::Shape(format!(
            "per-object parameter vectors must have length {p}"
        )));
    }
    out
}

pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let p = dataset.objects();
    if p == 0 {
        out.push(Violation::Dimensions("object count must be at least 1".into()));
    }
    for (name, m) in [
        ("counts", &dataset.counts),
        ("values", &dataset.values),
        ("categories", &dataset.categories),
    ] {
        if m.nrows() != p {
            out.push(Violation::Shape(format!("{name} has {} rows, expected {p}", m.nrows())));
        }
    }
    if dataset.categories.ncols() == 1 {
        out.push(Violation::Dimensions(
            "category count must be at least 2 when the multinomial modality is present".into(),
        ));
    }
    check_nonnegative("counts", &dataset.counts, &mut out);
    check_nonnegative("categories", &dataset.categories, &mut out);
    for j in 0..dataset.values.ncols() {
        for i in 0..dataset.values.nrows() {
            let v = dataset.values[(i, j)];
            if !v.is_finite() {
                out.push(Violation::NegativeOrNonFinite { matrix: "values", row: i, col: j, value: v });
            }
        }
    }
    if dataset.trials.len() != p {
        out.push(Violation::Shape(format!(
            "trial vector has length {}, expected {p}",
            dataset.trials.len()
        )));
    } else if dataset.categories.nrows() == p && dataset.categories.ncols() > 0 {
        for i in 0..p {
            let row_sum = dataset.categories.row(i).sum();
            if (row_sum - dataset.trials[i] as f64).abs() > 1e-9 {
                out.push(Violation::TrialMismatch { object: i, row_sum, trials: dataset.trials[i] });
            }
        }
    }
    if let Some(coords) = &dataset.coords {
        if coords.len() != p {
            out.push(Violation::Shape(format!(
                "coordinates given for {} objects, expected {p}",
                coords.len()
            )));
        }
        for (i, vs) in coords.iter().enumerate() {
            for (m, v) in vs.iter().enumerate() {
                let norm = v.norm();
                if (norm - 1.0).abs() > UNIT_NORM_TOL || !norm.is_finite() {
                    out.push(Violation::NotUnitNorm { what: format!("coordinate ({i},{m})"), norm });
                }
            }
        }
    }
    out
}

pub fn validate_params(params: &ModelParams) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = params.factors();
    if k == 0 {
        out.push(Violation::Dimensions("factor count must be at least 1".into()));
    }
    if params.loadings.iter().any(|v| !v.is_finite()) {
        out.push(Violation::Shape("loadings contain non-finite entries".into()));
    }
    for (name, v) in [("zeta", &params.pois_mean), ("alpha", &params.gaus_mean)] {
        if v.len() != k {
            out.push(Violation::Shape(format!("{name} has length {}, expected {k}", v.len())));
        }
    }
    check_square("R", &params.pois_cov, k, &mut out);
    check_square("S", &params.gaus_cov, k, &mut out);
    check_square("Q", &params.mult_cov, k, &mut out);
    check_positive("sigma2", &params.noise_var, &mut out);
    check_positive("vmf_s", &params.vmf_prior_conc, &mut out);
    check_positive("vmf_kappa", &params.vmf_obj_conc, &mut out);
    if params.vmf_mean_dirs.len() != k || params.vmf_prior_conc.len() != k {
        out.push(Violation::Shape(format!("vMF prior must have {k} factors")));
    }
    for (j, a) in params.vmf_mean_dirs.iter().enumerate() {
        let norm = a.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL || !norm.is_finite() {
            out.push(Violation::NotUnitNorm { what: format!("vmf_alpha[{j}]"), norm });
        }
    }
    out
}

pub(crate) fn random_unit_vector<R: rand::Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Deterministic starting parameters: small Gaussian loadings, zero prior
/// means, identity prior covariances and unit variances/concentrations.
pub fn init_params(dims: &Dimensions, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, k) = (dims.objects, dims.factors);
    let loadings = DMatrix::from_fn(p, k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        INIT_LOADING_SCALE * z
    });
    let vmf_mean_dirs = (0..k).map(|_| random_unit_vector(&mut rng)).collect();
    ModelParams {
        loadings,
        pois_mean: DVector::zeros(k),
        pois_cov: DMatrix::identity(k, k),
        gaus_mean: DVector::zeros(k),
        gaus_cov: DMatrix::identity(k, k),
        noise_var: DVector::from_element(p, 1.0),
        mult_cov: DMatrix::identity(k, k),
        vmf_mean_dirs,
        vmf_prior_conc: DVector::from_element(k, 1.0),
        vmf_obj_conc: DVector::from_element(p, 1.0),
    }
}
