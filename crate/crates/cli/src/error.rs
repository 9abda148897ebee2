use std::fmt;

/// Command failure carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or command sequencing (exit 2).
    Usage(String),
    /// Unreadable or malformed input files (exit 3).
    Format(String),
    /// NaN or infinity during training or scoring (exit 4).
    Numeric(String),
    /// A verification (gradient check) failed (exit 5).
    Verification(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Format(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Verification(_) => 5,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m)
            | CliError::Format(m)
            | CliError::Numeric(m)
            | CliError::Verification(m)
            | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<dval_core::Error> for CliError {
    fn from(e: dval_core::Error) -> Self {
        use dval_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Contract(_) => CliError::Usage(msg),
            E::Format(_) | E::Io(_) => CliError::Format(msg),
            E::NonFinite(_) => CliError::Numeric(msg),
            E::Tensor(_) => CliError::Internal(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a path to I/O and format errors.
pub trait WithPath<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T>;
}

impl<T, E: Into<CliError>> WithPath<T> for Result<T, E> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| match e.into() {
            CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
