//! von Mises–Fisher modality for spherical coordinates on S^2.
//!
//! Object `i` contributes `M_i` unit vectors `z_im`. Slot `m` has latent
//! scores `w_mk ~ vMF(alpha_k, s_k)` shared by every object that has an
//! `m`-th observation, and `z_im` has likelihood `exp(kappa_i c_i^T W_m z_im)`.
//! The posterior of each `w_mk` is again vMF with natural parameter
//! `s_k alpha_k + sum_i kappa_i c_ik z_im`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Concentrations are capped here; the rational approximation diverges as
/// the mean resultant length approaches 1.
pub const CONC_CAP: f64 = 1e6;
/// Lower bound keeping concentrations strictly positive.
pub const CONC_FLOOR: f64 = 1e-6;
/// Posterior concentrations below this are treated as antipodal cancellation.
pub const MIN_POSTERIOR_CONC: f64 = 1e-12;

const RESULTANT_CLIP: f64 = 1.0 - 1e-9;

/// Standard geographic-to-Cartesian mapping, in degrees.
pub fn latlon_to_sphere(lat: f64, lon: f64) -> Result<Vector3<f64>> {
    if !(-90.0..=90.0).contains(&lat) || !(lon > -180.0 && lon <= 180.0) {
        return Err(Error::Invalid(format!(
            "coordinate ({lat}, {lon}) outside latitude [-90, 90] / longitude (-180, 180]"
        )));
    }
    let (lat, lon) = (lat.to_radians(), lon.to_radians());
    Ok(Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()))
}

/// Inverse of [`latlon_to_sphere`], in degrees.
pub fn sphere_to_latlon(v: &Vector3<f64>) -> (f64, f64) {
    let lat = v.z.clamp(-1.0, 1.0).asin().to_degrees();
    let mut lon = v.y.atan2(v.x).to_degrees();
    if lon <= -180.0 {
        lon += 360.0;
    }
    (lat, lon)
}

/// `log C(kappa)` with `C(kappa) = kappa / (2 pi (e^kappa - e^-kappa))`.
pub fn log_normalizer(kappa: f64) -> f64 {
    kappa.ln() - (2.0 * PI).ln() - kappa - (-(-2.0 * kappa).exp()).ln_1p()
}

/// vMF posterior of one score vector: mean direction and concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirPosterior {
    pub dir: Vector3<f64>,
    pub conc: f64,
}

/// Normalizes a natural parameter, falling back to `fallback` on cancellation.
fn from_natural(natural: Vector3<f64>, fallback: &Vector3<f64>) -> (DirPosterior, bool) {
    let conc = natural.norm();
    if conc < MIN_POSTERIOR_CONC || !conc.is_finite() {
        (DirPosterior { dir: *fallback, conc: MIN_POSTERIOR_CONC }, true)
    } else {
        (DirPosterior { dir: natural / conc, conc }, false)
    }
}

/// Posterior of every factor's score given a single observation `z` of
/// object `i`: `a_k = (s_k alpha_k + kappa_i c_ik z) / b_k`.
pub fn e_step_single(
    z: &Vector3<f64>,
    loading_row: &DVector<f64>,
    mean_dirs: &[Vector3<f64>],
    prior_conc: &DVector<f64>,
    obj_conc: f64,
) -> (Vec<DirPosterior>, usize) {
    let mut fallbacks = 0;
    let post = (0..mean_dirs.len())
        .map(|k| {
            let natural = mean_dirs[k] * prior_conc[k] + z * (obj_conc * loading_row[k]);
            let (p, fell_back) = from_natural(natural, &mean_dirs[k]);
            fallbacks += fell_back as usize;
            p
        })
        .collect();
    (post, fallbacks)
}

/// Posterior over all slots, `slots[m][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfPosterior {
    pub slots: Vec<Vec<DirPosterior>>,
    pub fallbacks: usize,
}

/// Number of shared score slots, `max_i M_i`.
pub fn slot_count(coords: &[Vec<Vector3<f64>>]) -> usize {
    coords.iter().map(Vec::len).max().unwrap_or(0)
}

pub fn e_step(
    coords: &[Vec<Vector3<f64>>],
    loadings: &DMatrix<f64>,
    mean_dirs: &[Vector3<f64>],
    prior_conc: &DVector<f64>,
    obj_conc: &DVector<f64>,
) -> Result<VmfPosterior> {
    let k = loadings.ncols();
    if coords.len() != loadings.nrows() || mean_dirs.len() != k || obj_conc.len() != coords.len() {
        return Err(Error::Shape("vMF inputs disagree on object or factor count".into()));
    }
    let slots = slot_count(coords);
    if slots == 0 {
        return Err(Error::ModalityAbsent { modality: crate::model::Modality::Vmf });
    }
    let mut fallbacks = 0;
    let posteriors = (0..slots)
        .map(|m| {
            (0..k)
                .map(|f| {
                    let mut natural = mean_dirs[f] * prior_conc[f];
                    for (i, zs) in coords.iter().enumerate() {
                        if let Some(z) = zs.get(m) {
                            natural += z * (obj_conc[i] * loadings[(i, f)]);
                        }
                    }
                    let (p, fell_back) = from_natural(natural, &mean_dirs[f]);
                    fallbacks += fell_back as usize;
                    p
                })
                .collect()
        })
        .collect();
    Ok(VmfPosterior { slots: posteriors, fallbacks })
}

/// `(3 r - r^3) / (1 - r^2)` with `r` clipped to `[0, 1 - 1e-9]` and the
/// result clamped to `[CONC_FLOOR, CONC_CAP]`.
pub fn concentration_estimate(mean_resultant: f64) -> f64 {
    let r = mean_resultant.clamp(0.0, RESULTANT_CLIP);
    ((3.0 * r - r.powi(3)) / (1.0 - r * r)).clamp(CONC_FLOOR, CONC_CAP)
}

/// Mean direction and concentration estimate of a set of unit vectors,
/// normalizing the resultant by `count`. `None` if the resultant vanishes.
pub fn fit_direction<'a, I>(vectors: I, count: usize) -> Option<(Vector3<f64>, f64)>
where
    I: IntoIterator<Item = &'a Vector3<f64>>,
{
    let sum: Vector3<f64> = vectors.into_iter().sum();
    let norm = sum.norm();
    if norm < MIN_POSTERIOR_CONC || count == 0 {
        return None;
    }
    Some((sum / norm, concentration_estimate(norm / count as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmfUpdate {
    pub mean_dirs: Vec<Vector3<f64>>,
    pub prior_conc: DVector<f64>,
    pub obj_conc: DVector<f64>,
    /// Factors whose posterior means cancelled; their previous direction was kept.
    pub cancelled: Vec<usize>,
}

pub fn m_step(
    post: &VmfPosterior,
    coords: &[Vec<Vector3<f64>>],
    prev: (&[Vector3<f64>], &DVector<f64>, &DVector<f64>),
) -> Result<VmfUpdate> {
    let slots = post.slots.len();
    if slots == 0 {
        return Err(Error::ModalityAbsent { modality: crate::model::Modality::Vmf });
    }
    let k = post.slots[0].len();
    let mut mean_dirs = prev.0.to_vec();
    let mut prior_conc = prev.1.clone();
    let mut cancelled = Vec::new();
    for f in 0..k {
        let dirs: Vec<Vector3<f64>> = post.slots.iter().map(|s| s[f].dir).collect();
        match fit_direction(&dirs, slots) {
            Some((dir, conc)) => {
                mean_dirs[f] = dir;
                prior_conc[f] = conc;
            }
            None => cancelled.push(f),
        }
    }
    let mut obj_conc = prev.2.clone();
    for (i, zs) in coords.iter().enumerate() {
        if let Some((_, conc)) = fit_direction(zs, zs.len()) {
            obj_conc[i] = conc;
        } else if !zs.is_empty() {
            obj_conc[i] = CONC_FLOOR;
        }
    }
    Ok(VmfUpdate { mean_dirs, prior_conc, obj_conc, cancelled })
}

/// Linear coefficient of `c_i` in the expected vMF log-likelihood:
/// `kappa_i sum_m (a_mk^T z_im)` for each factor `k`.
pub fn loading_gradient(post: &VmfPosterior, coords_i: &[Vector3<f64>], obj_conc: f64) -> DVector<f64> {
    let k = post.slots.first().map_or(0, Vec::len);
    let mut g = DVector::zeros(k);
    for (m, z) in coords_i.iter().enumerate() {
        for f in 0..k {
            g[f] += post.slots[m][f].dir.dot(z);
        }
    }
    g * obj_conc
}

/// Expected complete-data log-likelihood with the posterior mean directions
/// plugged in for the scores.
pub fn expected_cll(
    post: &VmfPosterior,
    coords: &[Vec<Vector3<f64>>],
    loadings: &DMatrix<f64>,
    mean_dirs: &[Vector3<f64>],
    prior_conc: &DVector<f64>,
    obj_conc: &DVector<f64>,
) -> f64 {
    let mut total = 0.0;
    for (i, zs) in coords.iter().enumerate() {
        let c = crate::linalg::row_vector(loadings, i);
        total += zs.len() as f64 * log_normalizer(obj_conc[i]);
        total += loading_gradient(post, zs, obj_conc[i]).dot(&c);
    }
    for slot in &post.slots {
        for (f, p) in slot.iter().enumerate() {
            total += log_normalizer(prior_conc[f]) + prior_conc[f] * mean_dirs[f].dot(&p.dir);
        }
    }
    total
}

/// Draws from vMF(mean, kappa) on S^2 with Wood's rejection sampler.
pub fn sample<R: Rng + ?Sized>(rng: &mut R, mean: &Vector3<f64>, kappa: f64) -> Vector3<f64> {
    let mu = mean.normalize();
    let w = if kappa <= 0.0 {
        rng.random_range(-1.0..=1.0)
    } else {
        // dimension 3: the Beta((d-1)/2, (d-1)/2) proposal is uniform
        let b = 1.0 / (kappa + (kappa * kappa + 1.0).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + 2.0 * (1.0 - x0 * x0).ln();
        loop {
            let z: f64 = rng.random();
            let u: f64 = rng.random();
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            if kappa * w + 2.0 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        }
    };
    let helper = if mu.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - mu * mu.dot(&helper)).normalize();
    let e2 = mu.cross(&e1);
    let theta = rng.random_range(0.0..2.0 * PI);
    let radial = (1.0 - w * w).max(0.0).sqrt();
    mu * w + (e1 * theta.cos() + e2 * theta.sin()) * radial
}
