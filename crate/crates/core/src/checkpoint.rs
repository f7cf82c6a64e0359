//! JSON parameter checkpoints.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Dimensions, Modality, ModelParams};

pub const FORMAT_VERSION: u32 = 1;

/// Parameters as nested arrays, matrices stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    #[serde(rename = "C")]
    pub loadings: Vec<Vec<f64>>,
    pub zeta: Vec<f64>,
    #[serde(rename = "R")]
    pub pois_cov: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    #[serde(rename = "S")]
    pub gaus_cov: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    #[serde(rename = "Q")]
    pub mult_cov: Vec<Vec<f64>>,
    pub vmf_alpha: Vec<[f64; 3]>,
    pub vmf_s: Vec<f64>,
    pub vmf_kappa: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: Dimensions,
    pub params: ParamsRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_ids: Option<Vec<String>>,
    /// Mean Poisson count per object in the training data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_mean_counts: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modalities: Option<BTreeSet<Modality>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(name: &str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Shape(format!(
            "{name} row {bad} has {} entries, expected {ncols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn square(name: &str, rows: &[Vec<f64>], k: usize) -> Result<DMatrix<f64>> {
    if rows.len() != k {
        return Err(Error::Shape(format!("{name} has {} rows, expected {k}", rows.len())));
    }
    matrix(name, rows, k)
}

fn vector(name: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::Shape(format!("{name} has length {}, expected {len}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

impl From<&ModelParams> for ParamsRecord {
    fn from(p: &ModelParams) -> Self {
        Self {
            loadings: rows(&p.loadings),
            zeta: p.pois_mean.iter().copied().collect(),
            pois_cov: rows(&p.pois_cov),
            alpha: p.gaus_mean.iter().copied().collect(),
            gaus_cov: rows(&p.gaus_cov),
            sigma2: p.noise_var.iter().copied().collect(),
            mult_cov: rows(&p.mult_cov),
            vmf_alpha: p.vmf_mean_dirs.iter().map(|v| [v.x, v.y, v.z]).collect(),
            vmf_s: p.vmf_prior_conc.iter().copied().collect(),
            vmf_kappa: p.vmf_obj_conc.iter().copied().collect(),
        }
    }
}

impl ParamsRecord {
    pub fn to_params(&self) -> Result<ModelParams> {
        let p = self.loadings.len();
        let k = self.zeta.len();
        Ok(ModelParams {
            loadings: matrix("C", &self.loadings, k)?,
            pois_mean: vector("zeta", &self.zeta, k)?,
            pois_cov: square("R", &self.pois_cov, k)?,
            gaus_mean: vector("alpha", &self.alpha, k)?,
            gaus_cov: square("S", &self.gaus_cov, k)?,
            noise_var: vector("sigma2", &self.sigma2, p)?,
            mult_cov: square("Q", &self.mult_cov, k)?,
            vmf_mean_dirs: {
                if self.vmf_alpha.len() != k {
                    return Err(Error::Shape(format!("vmf_alpha has {} entries, expected {k}", self.vmf_alpha.len())));
                }
                self.vmf_alpha.iter().map(|a| Vector3::new(a[0], a[1], a[2])).collect()
            },
            vmf_prior_conc: vector("vmf_s", &self.vmf_s, k)?,
            vmf_obj_conc: vector("vmf_kappa", &self.vmf_kappa, p)?,
        })
    }
}

impl Checkpoint {
    pub fn new(dims: Dimensions, params: &ModelParams) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dims,
            params: params.into(),
            object_ids: None,
            object_mean_counts: None,
            modalities: None,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let params = self.params.to_params()?;
        if params.objects() != self.dims.objects || params.factors() != self.dims.factors {
            return Err(Error::Shape(format!(
                "parameters are {}x{} but dims say {} objects and {} factors",
                params.objects(),
                params.factors(),
                self.dims.objects,
                self.dims.factors
            )));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint format_version {}",
                cp.format_version
            )));
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
