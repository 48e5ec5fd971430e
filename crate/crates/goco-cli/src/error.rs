//! CLI error taxonomy with a stable exit-code contract:
//! 0 success, 2 configuration error, 3 numerical divergence, 4 I/O error.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "numerical divergence at iteration {iteration} (seed {seed}); partial telemetry retained"
    )]
    Divergence { seed: u64, iteration: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence { .. } => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<goco_core::Error> for CliError {
    fn from(err: goco_core::Error) -> Self {
        match err {
            goco_core::Error::Io(e) => CliError::Io(e.to_string()),
            goco_core::Error::Divergence { iteration, .. } => {
                // Callers that know the seed attach it; this fallback keeps
                // the conversion total.
                CliError::Divergence { seed: 0, iteration }
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
