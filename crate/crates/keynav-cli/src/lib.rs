//! Library surface of the CLI: run configuration, pipelines, the 2-D
//! projection, and report rendering. The binary in `main.rs` is a thin
//! argument parser over these.

pub mod config;
pub mod pipeline;
pub mod project;
pub mod report;

/// CLI-level failures, mapped to exit codes: config validation problems
/// exit 2, an unreachable backend exits 3, anything else exits 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Unreachable(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Unreachable(_) => 3,
            CliError::Failure(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Unreachable(m) => write!(f, "backend unreachable: {m}"),
            CliError::Failure(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}
