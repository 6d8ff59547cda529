use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lattice reconstruction failed: {0}")]
    Reconstruction(String),

    #[error("training failed: {reason} (last loss {last_loss:.4e})")]
    Training { reason: String, last_loss: f64 },

    #[error("estimation failed after {iterations} iterations: {reason}")]
    Estimation { reason: String, iterations: usize },

    #[error("assignment infeasible: {0}")]
    Infeasible(String),

    #[error("solver error at t = {t:.4e} s: {reason} (try dt <= {dt_hint:.3e} s)")]
    Solver { reason: String, t: f64, dt_hint: f64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("stage '{stage}' failed: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }

    /// True for errors caused by user input rather than by a failing computation.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_input_error(),
            e => matches!(e, Error::Domain(_) | Error::Config(_) | Error::Format { .. } | Error::Io(_)),
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}
