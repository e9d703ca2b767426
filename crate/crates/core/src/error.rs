use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate pose: pitch {pitch_deg:.4} deg is within 0.5 deg of +/-90")]
    DegeneratePose { pitch_deg: f64 },

    #[error("insufficient frames: scan has {frames} frames, need more than {min_gap}")]
    InsufficientFrames { frames: usize, min_gap: usize },

    #[error("infeasible mask: {0}")]
    InfeasibleMask(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite loss {loss} at step {step} (batch seed {batch_seed})")]
    NonFiniteLoss {
        step: usize,
        batch_seed: u64,
        loss: f64,
    },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable kind, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DegeneratePose { .. } => "degenerate-pose",
            Error::InsufficientFrames { .. } => "insufficient-frames",
            Error::InfeasibleMask(_) => "infeasible-mask",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::Format { .. } => "format",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::CheckpointMismatch(_) => "checkpoint-mismatch",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
