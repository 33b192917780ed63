//! Command implementations behind the `delay-sindy` binary.
//!
//! Every command takes a [`RunConfig`], writes its artifacts plus a
//! `manifest.txt` (the full config, re-runnable with `--config`) into the
//! output directory, and maps failures onto stable exit codes.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod svg;
pub mod sweep;

use std::path::{Path, PathBuf};

pub use config::RunConfig;

/// Environment variable capping the sweep worker count.
pub const WORKERS_ENV: &str = "DELAY_SINDY_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(delay_sindy::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for usage errors, 3 for numeric divergence, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        use delay_sindy::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::LossDiverged { .. } | E::NonFinite { .. } | E::SvdConvergence { .. } => 3,
                E::Io { .. } | E::Parse { .. } => 4,
                _ => 2,
            },
        }
    }
}

impl From<delay_sindy::Error> for CliError {
    fn from(e: delay_sindy::Error) -> Self {
        CliError::Core(e)
    }
}
