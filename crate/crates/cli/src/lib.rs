//! Command implementations behind the `anomaly-ddpm` binary.
//!
//! Every command reads one resolved [`config::RunConfig`] and writes its
//! artifacts below `paths.output_dir`. Errors are split in two classes so the
//! binary can map them to distinct exit codes: configuration problems
//! (bad file, incompatible checkpoints, stale calibration) exit with 2,
//! everything else with 1.

pub mod commands;
pub mod config;

use std::fmt;

/// A problem with the requested configuration rather than with execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] anomaly_ddpm::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("serialisation error: {e}"))
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Compute device selected by `ANOMALY_DDPM_DEVICE` (default `cpu`).
pub fn select_device() -> Result<candle_core::Device, ConfigError> {
    match std::env::var("ANOMALY_DDPM_DEVICE") {
        Err(_) => Ok(candle_core::Device::Cpu),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok(candle_core::Device::Cpu),
        Ok(v) => Err(ConfigError(format!(
            "device `{v}` is not available in this build (supported: cpu)"
        ))),
    }
}
