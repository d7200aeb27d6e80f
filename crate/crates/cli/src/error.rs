use std::fmt;

/// A failed run, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: bad flags or configuration.
    Config(String),
    /// Exit 3: an input artifact is missing.
    Missing(String),
    /// Exit 4: the remote evaluator failed or the evaluation budget ran out.
    Remote(String),
    /// Exit 1: anything else.
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Remote(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("configuration error", m),
            CliError::Missing(m) => ("missing artifact", m),
            CliError::Remote(m) => ("evaluator failure", m),
            CliError::Other(m) => ("error", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<maskpress_core::Error> for CliError {
    fn from(e: maskpress_core::Error) -> Self {
        use maskpress_core::Error as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Remote { .. } | E::Protocol(_) | E::Aborted(_) => CliError::Remote(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<maskpress_diffumask::Error> for CliError {
    fn from(e: maskpress_diffumask::Error) -> Self {
        use maskpress_diffumask::Error as E;
        match e {
            E::Core(inner) => inner.into(),
            E::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
