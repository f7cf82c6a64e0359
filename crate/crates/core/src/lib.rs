//! Multimodal factor analysis.
//!
//! Poisson counts, Gaussian values, multinomial category counts and
//! spherical (von Mises-Fisher) coordinates observed on a common set of
//! objects are explained by latent factor scores mixed through one shared
//! loading matrix. Parameters are fitted by EM: a Laplace approximation for
//! the Poisson scores, closed forms for the Gaussian ones, a fixed-curvature
//! quadratic bound for the multinomial ones and the conjugate update for vMF.

pub mod checkpoint;
pub mod cli;
pub mod driver;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod linalg;
pub mod loadings;
pub mod model;
pub mod multinomial;
pub mod poisson;
pub mod selection;
pub mod vmf;

pub use driver::{em_fit, Diagnostics, FitConfig, FitResult, Fitter, TraceRow};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{init_params, validate, Dataset, Dimensions, Modality, ModelParams, PosteriorState};
pub use selection::{perplexity, select_k, top_objects_per_factor};
