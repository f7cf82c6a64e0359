#![allow(dead_code)]

use mmfa::io::{LoadingStructure, SyntheticSpec};
use mmfa::model::{init_params, Dataset, Dimensions, ModelParams, PosteriorState};
use mmfa::poisson::{self, NewtonOptions, ScorePrior};
use mmfa::{gaussian, multinomial, vmf};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `|a - b| / max(|a|, |b|, 1)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

pub fn max_rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Central differences of a scalar function.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        let mut up = x.clone();
        let mut dn = x.clone();
        up[j] += h;
        dn[j] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

/// Central differences of a gradient, column by column.
pub fn fd_jacobian<G: Fn(&DVector<f64>) -> DVector<f64>>(g: G, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let k = x.len();
    let mut out = DMatrix::zeros(k, k);
    for j in 0..k {
        let mut up = x.clone();
        let mut dn = x.clone();
        up[j] += h;
        dn[j] -= h;
        out.set_column(j, &((g(&up) - g(&dn)) / (2.0 * h)));
    }
    out
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

/// Well-conditioned random SPD matrix `G G^T / k + diag`.
pub fn random_spd<R: Rng>(rng: &mut R, k: usize, diag: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, k, k, 1.0);
    &g * g.transpose() / k as f64 + DMatrix::identity(k, k) * diag
}

/// Orthonormal basis of the column space.
fn orthonormal(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().qr().q()
}

/// Largest principal angle between two column spaces, in degrees.
pub fn max_principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = orthonormal(a);
    let qb = orthonormal(b);
    let s = (qa.transpose() * qb).singular_values();
    let smallest = s.iter().copied().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    smallest.acos().to_degrees()
}

/// Least-squares map `T` minimizing `|| truth - estimate T ||`, so that the
/// columns of `estimate T` line up with the true factors.
pub fn align(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> DMatrix<f64> {
    let t = estimate.clone().svd(true, true).solve(truth, 1e-12).expect("svd solve");
    estimate * t
}

/// For each factor, the fraction of its top-`n` objects (by |loading| in the
/// aligned estimate) that belong to that factor's true block.
pub fn block_hit_rates(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, block_of: impl Fn(usize) -> usize, n: usize) -> Vec<f64> {
    let aligned = align(estimate, truth);
    (0..truth.ncols())
        .map(|j| {
            let col = aligned.column(j);
            let mut order: Vec<usize> = (0..col.len()).collect();
            order.sort_by(|&a, &b| col[b].abs().total_cmp(&col[a].abs()).then(a.cmp(&b)));
            let hits = order.iter().take(n).filter(|&&i| block_of(i) == j).count();
            hits as f64 / n as f64
        })
        .collect()
}

/// Dimensions with every object given `trials` multinomial trials.
pub fn dims(p: usize, n: usize, m: usize, d: usize, k: usize, trials: u64) -> Dimensions {
    let mut dims = Dimensions::new(p, n, m, d, k);
    if d > 0 {
        dims.trials = vec![trials; p];
    }
    dims
}

pub fn block_spec(dims: Dimensions, seed: u64) -> SyntheticSpec {
    let k = dims.factors;
    SyntheticSpec::new(dims, LoadingStructure::Block { blocks: k }, seed)
}

pub struct Instance {
    pub data: Dataset,
    pub params: ModelParams,
    pub post: PosteriorState,
}

/// Random instance with every modality's posterior filled in.
pub fn random_instance(seed: u64, p: usize, k: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, d) = (4, 3, 4);
    let counts = DMatrix::from_fn(p, n, |_, _| rng.random_range(0..5) as f64);
    let values = random_matrix(&mut rng, p, m, 2.0);
    let cats = DMatrix::from_fn(p, d, |_, _| rng.random_range(0..5) as f64 + 1.0);
    let coords: Vec<Vec<Vector3<f64>>> = (0..p)
        .map(|_| (0..2).map(|_| Vector3::from_fn(|_, _| rng.random::<f64>() - 0.5).normalize()).collect())
        .collect();
    let data = Dataset::new(counts, values, cats, Some(coords));
    let mut params = init_params(&data.dims(k), seed);
    params.loadings = random_matrix(&mut rng, p, k, 0.5);
    params.noise_var = DVector::from_fn(p, |_, _| rng.random_range(0.3..2.0));
    params.vmf_obj_conc = DVector::from_fn(p, |_, _| rng.random_range(1.0..10.0));
    let prior = ScorePrior::new(&random_vector(&mut rng, k, 0.3), &random_spd(&mut rng, k, 0.5)).unwrap();
    let (pois, _) = poisson::e_step(&data.counts, &params.loadings, &prior, None, &NewtonOptions::default()).unwrap();
    let gaus = gaussian::e_step(&data.values, &params.loadings, &params.noise_var, &params.gaus_mean, &params.gaus_cov).unwrap();
    let gamma = random_matrix(&mut rng, p, d - 1, 0.5);
    let mult = multinomial::e_step(&data.categories, &data.trials, &params.loadings, &random_spd(&mut rng, k, 0.5), &gamma).unwrap();
    let v = vmf::e_step(data.coords.as_ref().unwrap(), &params.loadings, &params.vmf_mean_dirs, &params.vmf_prior_conc, &params.vmf_obj_conc).unwrap();
    let post = PosteriorState { pois: Some(pois), gaus: Some(gaus), mult: Some(mult), vmf: Some(v) };
    Instance { data, params, post }
}

/// Composite Simpson over [lo, hi] with n (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Literal evaluation of the multinomial posterior: materializes
/// `C~_i = I ⊗ c_i^T` and the full precision.
pub fn dense_multinomial(
    h: &DMatrix<f64>,
    trials: &[u64],
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let (p, d, k) = (h.nrows(), h.ncols(), c.ncols());
    let n = d - 1;
    let a = multinomial::curvature(d);
    let a_inv = a.clone().try_inverse().unwrap();
    let q_inv = q.clone().try_inverse().unwrap();
    let mut precision = DMatrix::<f64>::identity(n, n).kronecker(&q_inv);
    let mut rhs = DVector::zeros(n * k);
    for i in 0..p {
        let l = trials[i] as f64;
        let mut ct = DMatrix::zeros(n, n * k);
        for r in 0..n {
            for f in 0..k {
                ct[(r, r * k + f)] = c[(i, f)];
            }
        }
        let g = gamma.row(i).transpose();
        let lse_grad = multinomial::softmax(&g);
        let freq = DVector::from_fn(n, |r, _| h[(i, r)] / l);
        let h_tilde = &a_inv * (freq - lse_grad) + &g;
        precision += ct.transpose() * &a * &ct * l;
        rhs += ct.transpose() * &a * h_tilde * l;
    }
    let cov = precision.try_inverse().unwrap();
    let mean = &cov * rhs;
    (mean, cov)
}

/// Largest absolute difference over every parameter block.
pub fn max_param_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    let m = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x - y).amax();
    let v = |x: &DVector<f64>, y: &DVector<f64>| (x - y).amax();
    let dirs = a.vmf_mean_dirs.iter().zip(&b.vmf_mean_dirs).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
    [
        m(&a.loadings, &b.loadings),
        v(&a.pois_mean, &b.pois_mean),
        m(&a.pois_cov, &b.pois_cov),
        v(&a.gaus_mean, &b.gaus_mean),
        m(&a.gaus_cov, &b.gaus_cov),
        v(&a.noise_var, &b.noise_var),
        m(&a.mult_cov, &b.mult_cov),
        dirs,
        v(&a.vmf_prior_conc, &b.vmf_prior_conc),
        v(&a.vmf_obj_conc, &b.vmf_obj_conc),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
