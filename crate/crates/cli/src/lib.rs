//! Configuration loading and entrypoints for the exporter, the registry
//! and the gate.

pub mod config;
pub mod presets;
pub mod services;

pub use config::StackConfig;
pub use services::{run_exporter, run_gate, run_registry, shutdown_signal, Overrides};

/// Exit status for a clean stop.
pub const EXIT_OK: i32 = 0;
/// Exit status for configuration errors.
pub const EXIT_CONFIG: i32 = 1;
/// Exit status for failures after startup began.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("config: section `{0}` is missing")]
    MissingSection(&'static str),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingSection(_) => EXIT_CONFIG,
            CliError::Bind { .. } | CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}
