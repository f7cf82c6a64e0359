//! Python bindings: datasets, fitting, evaluation and model selection.
//! Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use mmfa::checkpoint::Checkpoint;
use mmfa::io::{self, IngestOptions, LoadingStructure, SyntheticSpec, Vocab};
use mmfa::{Dimensions, FitConfig, Modality};
use nalgebra::{DMatrix, DVector, Vector3};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn to_py(e: mmfa::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn rows_of(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn matrix(rows: Option<Rows>, what: &str) -> PyResult<DMatrix<f64>> {
    let Some(rows) = rows else { return Ok(DMatrix::zeros(0, 0)) };
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn parse_modalities(names: Option<Vec<String>>) -> PyResult<Option<Vec<Modality>>> {
    names
        .map(|list| {
            list.iter()
                .map(|s| Modality::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown modality `{s}`"))))
                .collect()
        })
        .transpose()
}

/// Observations for a set of objects.
#[pyclass(name = "Dataset", module = "pymmfa", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: mmfa::Dataset,
}

#[pymethods]
impl PyDataset {
    /// `coords` holds, per object, a list of `(x, y, z)` unit vectors.
    #[new]
    #[pyo3(signature = (counts=None, values=None, categories=None, coords=None, object_ids=None))]
    fn new(
        counts: Option<Rows>,
        values: Option<Rows>,
        categories: Option<Rows>,
        coords: Option<Vec<Vec<[f64; 3]>>>,
        object_ids: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let coords = coords.map(|c| c.into_iter().map(|zs| zs.into_iter().map(Vector3::from).collect()).collect());
        let mut inner = mmfa::Dataset::new(
            matrix(counts, "counts")?,
            matrix(values, "values")?,
            matrix(categories, "categories")?,
            coords,
        );
        if let Some(ids) = object_ids {
            if ids.len() != inner.objects() {
                return Err(PyValueError::new_err(format!("{} object ids for {} objects", ids.len(), inner.objects())));
            }
            inner.object_ids = ids;
        }
        if let Some(v) = mmfa::model::validate_dataset(&inner).first() {
            return Err(PyValueError::new_err(v.to_string()));
        }
        Ok(Self { inner })
    }

    /// Reads a CSV data directory.
    #[staticmethod]
    #[pyo3(signature = (path, word_threshold=0))]
    fn from_dir(path: PathBuf, word_threshold: u64) -> PyResult<Self> {
        let ingested = io::ingest(&path, &IngestOptions { word_threshold, objects: None }).map_err(to_py)?;
        Ok(Self { inner: ingested.dataset })
    }

    fn to_dir(&self, path: PathBuf) -> PyResult<()> {
        io::write_dataset(&self.inner, &Vocab::for_dataset(&self.inner), &path).map_err(to_py)
    }

    #[getter]
    fn objects(&self) -> usize {
        self.inner.objects()
    }

    #[getter]
    fn object_ids(&self) -> Vec<String> {
        self.inner.object_ids.clone()
    }

    #[getter]
    fn counts(&self) -> Rows {
        rows_of(&self.inner.counts)
    }

    #[getter]
    fn values(&self) -> Rows {
        rows_of(&self.inner.values)
    }

    #[getter]
    fn categories(&self) -> Rows {
        rows_of(&self.inner.categories)
    }

    #[getter]
    fn coords(&self) -> Option<Vec<Vec<[f64; 3]>>> {
        self.inner.coords.as_ref().map(|c| c.iter().map(|zs| zs.iter().map(|z| [z.x, z.y, z.z]).collect()).collect())
    }

    /// Names of the modalities with data.
    fn modalities(&self) -> Vec<&'static str> {
        [Modality::Poisson, Modality::Gaussian, Modality::Multinomial, Modality::Vmf]
            .into_iter()
            .filter(|&m| self.inner.has(m))
            .map(Modality::short_name)
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(objects={}, modalities={:?})", self.inner.objects(), self.modalities())
    }
}

/// Fitted or true model parameters.
#[pyclass(name = "Params", module = "pymmfa", from_py_object)]
#[derive(Clone)]
pub struct PyParams {
    inner: mmfa::ModelParams,
    dims: Dimensions,
    object_ids: Option<Vec<String>>,
    mean_counts: Option<Vec<f64>>,
}

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let cp = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Self {
            inner: cp.params().map_err(to_py)?,
            dims: cp.dims,
            object_ids: cp.object_ids,
            mean_counts: cp.object_mean_counts,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut cp = Checkpoint::new(self.dims.clone(), &self.inner);
        cp.object_ids = self.object_ids.clone();
        cp.object_mean_counts = self.mean_counts.clone();
        cp.save(&path).map_err(to_py)
    }

    #[getter]
    fn loadings(&self) -> Rows {
        rows_of(&self.inner.loadings)
    }

    #[getter]
    fn noise_var(&self) -> Vec<f64> {
        vec_of(&self.inner.noise_var)
    }

    #[getter]
    fn pois_mean(&self) -> Vec<f64> {
        vec_of(&self.inner.pois_mean)
    }

    #[getter]
    fn pois_cov(&self) -> Rows {
        rows_of(&self.inner.pois_cov)
    }

    #[getter]
    fn gaus_mean(&self) -> Vec<f64> {
        vec_of(&self.inner.gaus_mean)
    }

    #[getter]
    fn gaus_cov(&self) -> Rows {
        rows_of(&self.inner.gaus_cov)
    }

    #[getter]
    fn mult_cov(&self) -> Rows {
        rows_of(&self.inner.mult_cov)
    }

    #[getter]
    fn vmf_mean_dirs(&self) -> Vec<[f64; 3]> {
        self.inner.vmf_mean_dirs.iter().map(|d| [d.x, d.y, d.z]).collect()
    }

    #[getter]
    fn vmf_prior_conc(&self) -> Vec<f64> {
        vec_of(&self.inner.vmf_prior_conc)
    }

    #[getter]
    fn vmf_obj_conc(&self) -> Vec<f64> {
        vec_of(&self.inner.vmf_obj_conc)
    }

    /// Held-out perplexity of a count matrix (objects x columns).
    fn perplexity(&self, heldout: Rows) -> PyResult<f64> {
        mmfa::perplexity(&self.inner, &matrix(Some(heldout), "heldout")?).map_err(to_py)
    }

    /// `(rank, object_id, loading, mean_count)` for the `top` objects with the
    /// largest |loading| on the 1-based `factor`.
    #[pyo3(signature = (factor, top=10))]
    fn top_objects(&self, factor: usize, top: usize) -> PyResult<Vec<(usize, String, f64, f64)>> {
        let p = self.inner.objects();
        let ids = self.object_ids.clone().unwrap_or_else(|| (0..p).map(|i| i.to_string()).collect());
        let means = self.mean_counts.clone().unwrap_or_else(|| vec![0.0; p]);
        let ranked = mmfa::selection::rank_objects(&self.inner.loadings, &ids, &means, factor, top).map_err(to_py)?;
        Ok(ranked.into_iter().map(|r| (r.rank, r.object_id, r.loading, r.mean_count)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Params(objects={}, factors={})", self.inner.objects(), self.inner.factors())
    }
}

/// Outcome of [`fit`].
#[pyclass(name = "FitResult", module = "pymmfa", get_all)]
pub struct PyFitResult {
    params: Py<PyParams>,
    iterations: usize,
    converged: bool,
    modalities: Vec<&'static str>,
    trace: Vec<Py<PyDict>>,
}

fn config(
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    modalities: Option<Vec<String>>,
) -> PyResult<FitConfig> {
    let mut cfg = FitConfig::new(k).with_max_iters(max_iters).with_tol(tol).with_seed(seed);
    if let Some(list) = parse_modalities(modalities)? {
        cfg = cfg.with_modalities(&list);
    }
    Ok(cfg)
}

/// Fits `k` factors by EM. `modalities` is a subset of
/// `["pois", "gaus", "mult", "vmf"]`; by default every present modality is
/// used, with vMF preferred over Gaussian.
#[pyfunction]
#[pyo3(signature = (dataset, k, max_iters=200, tol=1e-6, seed=0, modalities=None))]
fn fit(
    py: Python<'_>,
    dataset: &PyDataset,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    modalities: Option<Vec<String>>,
) -> PyResult<PyFitResult> {
    let cfg = config(k, max_iters, tol, seed, modalities)?;
    let data = &dataset.inner;
    let result = py.detach(|| mmfa::em_fit(data, &cfg)).map_err(to_py)?;
    let trace = result
        .trace
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("iteration", r.iteration)?;
            d.set_item("objective", r.objective)?;
            d.set_item("pois", r.pois)?;
            d.set_item("gaus", r.gaus)?;
            d.set_item("mult", r.mult)?;
            d.set_item("vmf", r.vmf)?;
            d.set_item("wall_time", r.wall_time)?;
            Ok(d.unbind())
        })
        .collect::<PyResult<_>>()?;
    let params = PyParams {
        inner: result.params,
        dims: data.dims(k),
        object_ids: Some(data.object_ids.clone()),
        mean_counts: Some(data.mean_counts()),
    };
    Ok(PyFitResult {
        params: Py::new(py, params)?,
        iterations: result.diagnostics.iterations,
        converged: result.diagnostics.converged,
        modalities: result.modalities.iter().map(|m| m.short_name()).collect(),
        trace,
    })
}

/// Scores each factor count by held-out Poisson perplexity. Returns
/// `(best_k, [(k, perplexity), ...])`.
#[pyfunction]
#[pyo3(signature = (dataset, grid, max_iters=200, tol=1e-6, seed=0, modalities=None))]
fn select_k(
    py: Python<'_>,
    dataset: &PyDataset,
    grid: Vec<usize>,
    max_iters: usize,
    tol: f64,
    seed: u64,
    modalities: Option<Vec<String>>,
) -> PyResult<(usize, Vec<(usize, f64)>)> {
    let first = *grid.first().ok_or_else(|| PyValueError::new_err("empty grid"))?;
    let cfg = config(first, max_iters, tol, seed, modalities)?;
    let data = &dataset.inner;
    let (best, table) = py.detach(|| mmfa::select_k(data, &grid, &cfg)).map_err(to_py)?;
    Ok((best, table.into_iter().map(|s| (s.k, s.perplexity)).collect()))
}

/// Samples a synthetic dataset. `structure` is `"block"` (contiguous object
/// blocks, one per factor) or `"dense"`. Returns `(dataset, true_params)`.
#[pyfunction]
#[pyo3(signature = (objects, factors, count_columns=0, value_columns=0, categories=0, trials=0, coords_per_object=0, structure="block", seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    objects: usize,
    factors: usize,
    count_columns: usize,
    value_columns: usize,
    categories: usize,
    trials: u64,
    coords_per_object: usize,
    structure: &str,
    seed: u64,
) -> PyResult<(PyDataset, PyParams)> {
    let structure = match structure {
        "block" => LoadingStructure::Block { blocks: factors },
        "dense" => LoadingStructure::Dense,
        other => return Err(PyValueError::new_err(format!("unknown structure `{other}`"))),
    };
    let mut dims = Dimensions::new(objects, count_columns, value_columns, categories, factors);
    if categories > 0 {
        dims.trials = vec![trials; objects];
    }
    let mut spec = SyntheticSpec::new(dims, structure, seed);
    spec.coords_per_object = coords_per_object;
    let (data, truth) = io::generate(&spec).map_err(to_py)?;
    let params = PyParams { inner: truth, dims: spec.dims, object_ids: Some(data.object_ids.clone()), mean_counts: None };
    Ok((PyDataset { inner: data }, params))
}

#[pymodule]
fn pymmfa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(select_k, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
