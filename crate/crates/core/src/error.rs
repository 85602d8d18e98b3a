use thiserror::Error;

/// Errors produced while loading data, fitting nuisances or estimating effects.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error on line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("domain error on line {line}: column `{column}` must be 0 or 1, found `{value}`")]
    Domain {
        line: u64,
        column: String,
        value: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Iterative solver stopped before reaching its tolerance. `last` is the final iterate.
    #[error("{solver} did not converge after {iterations} iterations (criterion {criterion:.3e})")]
    Convergence {
        solver: &'static str,
        iterations: usize,
        criterion: f64,
        last: Vec<f64>,
    },

    #[error("{0}: perfect separation detected (coefficients diverging)")]
    Separation(&'static str),

    #[error("singular system in {0}")]
    Singular(String),

    #[error("weak instrument: {0}")]
    WeakInstrument(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("{step}: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: &'static str) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// The innermost error, with step labels peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures that mean the estimate could not be formed from this
    /// data (as opposed to usage or IO problems).
    pub fn is_estimation_abort(&self) -> bool {
        matches!(
            self.root(),
            Error::WeakInstrument(_)
                | Error::Precondition(_)
                | Error::Convergence { .. }
                | Error::Separation(_)
                | Error::Singular(_)
                | Error::Inference(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
