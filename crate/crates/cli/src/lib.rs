//! Orchestration behind the `vqadiff` binary: configuration, the stage
//! cache and one function per subcommand.

pub mod cache;
pub mod commands;
pub mod config;

use config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] vqadiff_core::Error),
}

impl CliError {
    /// 2 for configuration, 3 for backend failures, 4 for everything else
    /// (invalid inputs, incomplete renders, I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_backend() => 3,
            CliError::Core(_) => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
