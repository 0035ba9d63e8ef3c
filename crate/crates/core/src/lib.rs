//! Learns the exponentially-transformed optimal value function of a
//! KL-regularized diffusion fine-tuning problem by solving an empirical
//! variational-inequality problem over a ball-constrained linear function
//! class, and extracts the plug-in control policy.
//!
//! The crate is organized around the pipeline:
//!
//! 1. [`diffusion`] — uncontrolled/controlled SDEs and Euler-Maruyama simulation,
//! 2. [`rewards`] — intermediate/terminal reward models, noise, and rescaling,
//! 3. [`dataset`] — discretely-observed trajectory datasets and their file format,
//! 4. [`fnclass`] — the tensor time-Legendre x spatial-feature function class,
//! 5. [`forms`] — empirical and quadrature energy/bilinear forms,
//! 6. [`solver`] — the ball-constrained proximal iteration,
//! 7. [`oracle`] — Feynman-Kac Monte Carlo, closed forms, manufactured problems,
//! 8. [`policy`] — plug-in policies, objective/KL estimation, mirror descent,
//!    and the classifier-guidance baseline.

pub mod dataset;
pub mod diffusion;
pub mod fnclass;
pub mod forms;
pub mod oracle;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod solver;

pub use dataset::{ObservationDataset, ObservationRecord};
pub use diffusion::{DiffusionMatrix, DiffusionSpec, Drift, InitLaw, PathBatch};
pub use fnclass::{BasisSpec, SpatialFeature, ValueModel};
pub use forms::{FormContext, Measure};
pub use oracle::{OracleConfig, PotentialScaling};
pub use policy::{PolicyHandle, PolicySource};
pub use rewards::{IntermediateReward, NoiseModel, RewardSpec, TerminalReward};
pub use solver::{FitReport, SolverConfig};

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} in {context}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("non-finite value at t={t}, x={x:?} in {context}")]
    NonFinite {
        t: f64,
        x: Vec<f64>,
        context: &'static str,
    },
    #[error("path {path} exceeded blow-up bound {bound:.3e} at step {step} (t={t})")]
    BlowUp {
        path: usize,
        step: usize,
        t: f64,
        bound: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("reward bound violated in normalized mode: R={value} at t={t} (allowed [{lo}, {hi}])")]
    RewardBoundViolation { value: f64, t: f64, lo: f64, hi: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("parse error at record {record}: {message}")]
    ParseError { record: usize, message: String },
    #[error("Gram factorization failed even after ridge {ridge:.3e}; increase the ridge")]
    GramFactorization { ridge: f64 },
    #[error("manufactured value function is non-positive ({value:.3e}) at t={t}, x={x:?}")]
    NonPositiveValue { t: f64, x: Vec<f64>, value: f64 },
    #[error("{0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
