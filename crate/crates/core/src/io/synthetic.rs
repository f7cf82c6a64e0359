//! Sampling datasets from the generative model.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::checkpoint::ParamsRecord;
use crate::error::{Error, Result};
use crate::linalg::{self, EXP_CLIP};
use crate::model::{self, Dataset, Dimensions, ModelParams};
use crate::multinomial::softmax;
use crate::vmf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadingStructure {
    /// Loadings drawn i.i.d. `N(0, 1)`.
    Dense,
    /// Objects split into contiguous equal blocks; block `b` loads only on factor `b`.
    Block { blocks: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dims: Dimensions,
    pub seed: u64,
    pub structure: LoadingStructure,
    /// Spherical observations per object; 0 leaves the vMF modality out.
    #[serde(default)]
    pub coords_per_object: usize,
    /// True parameters; [`SyntheticSpec::default_params`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsRecord>,
}

impl SyntheticSpec {
    pub fn new(dims: Dimensions, structure: LoadingStructure, seed: u64) -> Self {
        Self { dims, seed, structure, coords_per_object: 0, params: None }
    }

    /// Block index of object `i` under [`LoadingStructure::Block`].
    pub fn block_of(&self, i: usize) -> Option<usize> {
        match self.structure {
            LoadingStructure::Block { blocks } => Some(i * blocks / self.dims.objects),
            LoadingStructure::Dense => None,
        }
    }

    /// Moderate defaults: unit or block loadings, `zeta = 1`, `R = I/2`,
    /// `alpha = 0`, `S = I`, `sigma2 = 1/4`, `Q = I`, `s_k = 5`, `kappa_i = 20`.
    pub fn default_params(&self) -> ModelParams {
        let (p, k) = (self.dims.objects, self.dims.factors);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c0de);
        let loadings = match self.structure {
            LoadingStructure::Dense => DMatrix::from_fn(p, k, |_, _| StandardNormal.sample(&mut rng)),
            LoadingStructure::Block { .. } => {
                DMatrix::from_fn(p, k, |i, j| if self.block_of(i) == Some(j) { 1.0 } else { 0.0 })
            }
        };
        let mut params = model::init_params(&self.dims, self.seed);
        params.loadings = loadings;
        params.pois_mean = DVector::from_element(k, 1.0);
        params.pois_cov = DMatrix::identity(k, k) * 0.5;
        params.noise_var = DVector::from_element(p, 0.25);
        params.vmf_mean_dirs = (0..k).map(|_| model::random_unit_vector(&mut rng)).collect();
        params.vmf_prior_conc = DVector::from_element(k, 5.0);
        params.vmf_obj_conc = DVector::from_element(p, 20.0);
        params
    }

    pub fn true_params(&self) -> Result<ModelParams> {
        match &self.params {
            Some(r) => r.to_params(),
            None => Ok(self.default_params()),
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut problems = self.dims.violations();
        if let LoadingStructure::Block { blocks } = self.structure {
            if blocks == 0 || blocks > self.dims.factors {
                problems.push(format!("block count {blocks} must be in 1..={}", self.dims.factors));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Draws `n` columns of `N(mean, cov)` as a K x n matrix.
fn gaussian_columns<R: Rng>(rng: &mut R, mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let chol = linalg::cholesky(&linalg::symmetrize(cov))
        .ok_or_else(|| Error::Invalid("score covariance is not positive definite".into()))?;
    let l = chol.l();
    let k = mean.len();
    let mut out = DMatrix::zeros(k, n);
    for j in 0..n {
        let e = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
        out.set_column(j, &(mean + &l * e));
    }
    Ok(out)
}

/// Multinomial draw by a chain of conditional binomials.
fn multinomial<R: Rng>(rng: &mut R, trials: u64, probs: &DVector<f64>) -> Vec<u64> {
    let mut left = trials;
    let mut mass = 1.0;
    let mut out = vec![0; probs.len()];
    for (d, &pd) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if d + 1 == probs.len() {
            out[d] = left;
            break;
        }
        let q = (pd / mass).clamp(0.0, 1.0);
        let x = Binomial::new(left, q).expect("probability in [0, 1]").sample(rng);
        out[d] = x;
        left -= x;
        mass -= pd;
    }
    out
}

/// Samples a dataset from the model with the spec's true parameters.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, ModelParams)> {
    spec.check()?;
    let params = spec.true_params()?;
    let dims = &spec.dims;
    let (p, k) = (dims.objects, dims.factors);
    if params.objects() != p || params.factors() != k {
        return Err(Error::Shape(format!(
            "true parameters are {}x{}, dims say {p}x{k}",
            params.objects(),
            params.factors()
        )));
    }
    let report = model::validate_params(&params);
    if let Some(v) = report.first() {
        return Err(Error::Invalid(format!("true parameters: {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = &params.loadings;

    let x = gaussian_columns(&mut rng, &params.pois_mean, &params.pois_cov, dims.count_columns)?;
    let eta = c * &x;
    let mut counts = DMatrix::zeros(p, dims.count_columns);
    for j in 0..dims.count_columns {
        for i in 0..p {
            let t = eta[(i, j)];
            if t > EXP_CLIP {
                return Err(Error::Invalid(format!(
                    "Poisson log-rate {t:.1} for object {i}, column {j} overflows; shrink the loadings or the score prior"
                )));
            }
            let rate = t.exp();
            counts[(i, j)] = Poisson::new(rate)
                .map_err(|e| Error::Invalid(format!("Poisson rate {rate:e} for object {i}, column {j}: {e}")))?
                .sample(&mut rng);
        }
    }

    let w = gaussian_columns(&mut rng, &params.gaus_mean, &params.gaus_cov, dims.value_columns)?;
    let mut values = c * &w;
    for j in 0..dims.value_columns {
        for i in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            values[(i, j)] += params.noise_var[i].sqrt() * e;
        }
    }

    let d = dims.categories;
    let mut categories = DMatrix::zeros(p, d);
    if d >= 2 {
        let u = gaussian_columns(&mut rng, &DVector::zeros(k), &params.mult_cov, d - 1)?;
        let logits = c * &u;
        for i in 0..p {
            let probs = with_pivot(&softmax(&logits.row(i).transpose()));
            for (j, n) in multinomial(&mut rng, dims.trials[i], &probs).into_iter().enumerate() {
                categories[(i, j)] = n as f64;
            }
        }
    }

    let coords = (spec.coords_per_object > 0).then(|| {
        let slots: Vec<Vec<Vector3<f64>>> = (0..spec.coords_per_object)
            .map(|_| (0..k).map(|f| vmf::sample(&mut rng, &params.vmf_mean_dirs[f], params.vmf_prior_conc[f])).collect())
            .collect();
        (0..p)
            .map(|i| {
                slots
                    .iter()
                    .map(|w| {
                        let natural: Vector3<f64> = (0..k).map(|f| w[f] * c[(i, f)]).sum::<Vector3<f64>>() * params.vmf_obj_conc[i];
                        let kappa = natural.norm();
                        if kappa > 0.0 {
                            vmf::sample(&mut rng, &(natural / kappa), kappa)
                        } else {
                            model::random_unit_vector(&mut rng)
                        }
                    })
                    .collect()
            })
            .collect()
    });

    let mut dataset = Dataset::new(counts, values, categories, coords);
    if d >= 2 {
        dataset.trials = dims.trials.clone();
    }
    Ok((dataset, params))
}

/// Appends the pivot category's probability.
fn with_pivot(head: &DVector<f64>) -> DVector<f64> {
    let n = head.len();
    let mut out = head.clone().resize_vertically(n + 1, 0.0);
    out[n] = (1.0 - head.sum()).max(0.0);
    out
}
