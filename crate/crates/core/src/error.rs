use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GtpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GtpError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged in stage {stage}, epoch {epoch}: loss = {loss}")]
    Divergence { stage: usize, epoch: usize, loss: f64 },

    #[error("degenerate projection: homogeneous w = {0:e}")]
    DegenerateProjection(f64),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("scene unusable: {0}")]
    SceneUnusable(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GtpError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        GtpError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        GtpError::Contract(msg.into())
    }

    /// True for errors caused by bad or unusable input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            GtpError::Parse { .. }
                | GtpError::Data(_)
                | GtpError::SceneUnusable(_)
                | GtpError::Io(_)
                | GtpError::Json(_)
                | GtpError::Csv(_)
                | GtpError::Checkpoint(_)
        )
    }

    /// True for numeric blow-ups (non-finite state or loss).
    pub fn is_numeric(&self) -> bool {
        matches!(self, GtpError::NonFinite { .. } | GtpError::Divergence { .. })
    }
}
