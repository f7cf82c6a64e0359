use std::path::PathBuf;

use thiserror::Error;

use crate::driver::TraceRow;
use crate::model::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{modality} modality is absent from the dataset")]
    ModalityAbsent { modality: Modality },

    #[error("{what} did not converge after {iterations} iterations (gradient inf-norm {grad_norm:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("EM iteration {iteration} failed in {module}: {source}")]
    Fit {
        iteration: usize,
        module: &'static str,
        #[source]
        source: Box<Error>,
        /// Rows of the iterations that completed before the failure.
        partial_trace: Vec<TraceRow>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotConverged { .. } | Error::Factorization(_) => true,
            Error::Fit { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
