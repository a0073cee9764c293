//! Experiment commands behind the `cascade-mvs` binary: scene synthesis,
//! training, inference, fusion, evaluation and gradient checks.

pub mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] cascade_mvs::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Core(e) => e.kind(),
        }
    }

    /// Single machine-parsable line: `error: kind=<Kind> msg=<text>`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error: kind={} msg={}", self.kind(), msg)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
