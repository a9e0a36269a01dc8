use thiserror::Error;

pub type Result<T, E = SarError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SarError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unsupported problem: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stopping rule {rule} did not converge before t_max = {t_max:e} (value there {value:e})")]
    NotConverged {
        rule: &'static str,
        t_max: f64,
        value: f64,
    },

    #[error("stopping failed at delta = {delta:e}: {source}")]
    SweepStop {
        delta: f64,
        #[source]
        source: Box<SarError>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SarError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SarError::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        SarError::Numerical(msg.into())
    }

    /// Short machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            SarError::Domain(_) => "domain",
            SarError::Config(_) => "config",
            SarError::Dimension { .. } => "dimension",
            SarError::Unsupported(_) => "unsupported",
            SarError::Numerical(_) => "numerical",
            SarError::NotConverged { .. } | SarError::SweepStop { .. } => "stopping",
            SarError::Parse(_) => "parse",
            SarError::Io(_) => "io",
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SarError::Config(_) | SarError::Parse(_) | SarError::Dimension { .. } => 2,
            SarError::NotConverged { .. } | SarError::SweepStop { .. } => 4,
            _ => 3,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SarError::Dimension { expected, got })
    }
}
