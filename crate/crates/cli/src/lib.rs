//! Command-line driver: phantom synthesis, training, evaluation, ablation
//! and sweep experiments, and report regeneration.

mod commands;
mod config;
mod plots;

pub use commands::dispatch;
pub use config::{parse_config, split_override, Command, PhantomOptions, Precision, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{module}: {source}")]
    Module {
        module: &'static str,
        #[source]
        source: mutualseg::Error,
    },
    #[error("plot: {0}")]
    Plot(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) trait Tag<T> {
    fn tag(self, module: &'static str) -> Result<T, CliError>;
}

impl<T> Tag<T> for mutualseg::Result<T> {
    fn tag(self, module: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Module { module, source })
    }
}

/// Version string recorded in manifests.
pub fn version_string() -> String {
    format!(
        "mutualseg {} (git {})",
        env!("CARGO_PKG_VERSION"),
        env!("MUTUALSEG_GIT_REV")
    )
}
