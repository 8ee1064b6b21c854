use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// The variants are grouped so that callers (the CLI in particular) can tell
/// configuration problems apart from failures of an estimator on valid input.
#[derive(Debug, Error)]
pub enum MeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("proxies {0} and {1} are never observed together")]
    NotCoObserved(usize, usize),

    #[error("identification failed: {0}")]
    Identification(String),

    #[error("error model violated: {0}")]
    ModelViolation(String),

    #[error("fit did not converge after {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        last: Vec<f64>,
    },

    #[error("complete or quasi-complete separation detected in logistic fit")]
    Separation,

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("inference failed: {msg} (rank {rank} of {dim})")]
    Inference { msg: String, rank: usize, dim: usize },

    #[error("reconstruction failed: {0}")]
    Reconstruction(String),

    #[error("extrapolation failed: {0}")]
    Extrapolation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("diagnostic failed: {0}")]
    Diagnostic(String),

    #[error("{0} is not implemented")]
    NotImplemented(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MeError {
    /// True for errors caused by bad input files, specs or options rather
    /// than by an estimator failing on well-formed input.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            MeError::Config(_)
                | MeError::Parse { .. }
                | MeError::Data(_)
                | MeError::Precondition(_)
                | MeError::NotImplemented(_)
                | MeError::Io(_)
                | MeError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, MeError>;
