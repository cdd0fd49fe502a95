use thiserror::Error;

/// Failure of a subcommand, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input files, settings or paths (exit code 2).
    #[error("{0}")]
    Input(String),
    /// The numerics gave up (exit code 1).
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 1,
            CliError::Input(_) => 2,
        }
    }

    pub(crate) fn io(what: &str, path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{what} {}: {e}", path.display()))
    }
}

impl From<panelgp::Error> for CliError {
    fn from(e: panelgp::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}
