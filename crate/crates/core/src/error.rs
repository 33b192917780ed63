use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown system `{0}` (expected lorenz, rossler or lotka_volterra)")]
    UnknownSystem(String),

    #[error("system `{name}` takes {expected} parameters, got {got}")]
    ParamCount {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("integration diverged at step {step}")]
    Diverged { step: usize },

    #[error("index {index} out of range for dimension {dim}")]
    OutOfRange { index: usize, dim: usize },

    #[error("series too short: need at least {required} samples, got {got}")]
    TooShort { required: usize, got: usize },

    #[error("time grid is not uniformly sampled near index {index}")]
    NonUniform { index: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("eigen-solver did not converge after {sweeps} sweeps")]
    SvdConvergence { sweeps: usize },

    #[error("non-finite value produced in layer {layer}")]
    NonFinite { layer: usize },

    #[error("initialization mode `{0}` requires a reference coefficient matrix")]
    MissingTrueXi(String),

    #[error("training loss became non-finite at epoch {epoch}")]
    LossDiverged { epoch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
