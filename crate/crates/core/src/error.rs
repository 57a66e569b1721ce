use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("solver did not converge after {iterations} sweeps (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("training diverged for member {member} at epoch {epoch} (loss {loss:e})")]
    Divergence { member: usize, epoch: usize, loss: f64 },

    #[error("no feasible action found among sampled candidates")]
    Infeasible,

    /// The message already carries the inner error, so it is not
    /// exposed again as a source.
    #[error("{stage}: {inner}")]
    Stage { stage: String, inner: Box<Error> },

    #[error("malformed document: {0}")]
    Format(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            inner: Box::new(self),
        }
    }
}
