use std::path::Path;

/// Failures mapped onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, missing inputs or inputs that fail validation (exit 1).
    #[error("{0}")]
    Invalid(String),
    /// Anything that goes wrong after the inputs were accepted (exit 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<brnlab::Error> for CliError {
    fn from(e: brnlab::Error) -> Self {
        use brnlab::Error as E;
        match e {
            E::Format { .. } | E::Annotation { .. } | E::Validation { .. } | E::Shape { .. } | E::Json(_) => {
                CliError::Invalid(e.to_string())
            }
            E::Io { .. } | E::Generation { .. } | E::NonFinite { .. } | E::Unimplemented(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

/// Reject a missing input path before doing any work.
pub fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{what} `{}` does not exist", path.display())))
    }
}
