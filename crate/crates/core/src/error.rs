use thiserror::Error;

use crate::dominating::HorizonCertificate;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("time {t} outside grid [{t0}, {t1}]")]
    Domain { t: f64, t0: f64, t1: f64 },

    #[error("path junction mismatch: {0}")]
    Junction(String),

    #[error("declared structure contradicted by probing: coefficient `{coefficient}` {detail}")]
    Classification { coefficient: String, detail: String },

    #[error("non-finite coefficient value: {0}")]
    Evaluation(String),

    #[error("unknown catalog problem `{0}`")]
    Catalog(String),

    #[error("singular regression at node {node} (condition number {condition:.3e})")]
    Regression { node: usize, condition: f64 },

    #[error("underdetermined fit: {features} features need at least {required} samples, got {samples}")]
    UnderdeterminedFit {
        features: usize,
        required: usize,
        samples: usize,
    },

    #[error("divergence at node {node}: {detail}")]
    Divergence { node: usize, detail: String },

    #[error("Picard map is not contracting: residual did not decrease over iterations {from}..{to} ({last:.3e})")]
    NonContraction {
        from: usize,
        to: usize,
        last: f64,
        residuals: Vec<f64>,
    },

    #[error("Picard iteration did not reach tolerance {tol:.1e} in {iterations} iterations (last residual {last:.3e})")]
    NonConvergence {
        iterations: usize,
        tol: f64,
        last: f64,
        residuals: Vec<f64>,
    },

    #[error("dominating ODE integration failed: {0}")]
    Integration(String),

    #[error("horizon {horizon} not certified: dominating ODE explodes after {t_max:.6}")]
    Horizon {
        horizon: f64,
        t_max: f64,
        certificate: Box<HorizonCertificate>,
    },

    #[error("maximal interval reached at t = {t_min_lower_bound:.6}: K(t)*|grad_z sigma| = {product:.4} >= 1")]
    MaximalInterval {
        t_min_lower_bound: f64,
        product: f64,
        certificate: Box<HorizonCertificate>,
    },

    #[error("degenerate characteristic pair: {0}")]
    Degenerate(String),

    #[error("node {node} is not a node of the field (0..={last})")]
    Node { node: usize, last: usize },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("patch {patch} [{start}, {end}] failed: {source}")]
    Patch {
        patch: usize,
        start: f64,
        end: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Refusals are diagnoses of ill-posedness, not failures of the solver.
    pub fn is_refusal(&self) -> bool {
        match self {
            Error::Horizon { .. } | Error::MaximalInterval { .. } => true,
            Error::Patch { source, .. } => source.is_refusal(),
            _ => false,
        }
    }

    pub fn is_non_convergence(&self) -> bool {
        match self {
            Error::NonContraction { .. } | Error::NonConvergence { .. } | Error::Divergence { .. } => {
                true
            }
            Error::Patch { source, .. } => source.is_non_convergence(),
            _ => false,
        }
    }

    pub fn certificate(&self) -> Option<&HorizonCertificate> {
        match self {
            Error::Horizon { certificate, .. } | Error::MaximalInterval { certificate, .. } => {
                Some(certificate)
            }
            Error::Patch { source, .. } => source.certificate(),
            _ => None,
        }
    }
}
