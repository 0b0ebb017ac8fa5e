use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's contract (shapes, ranks, state).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward value became non-finite.
    #[error("numeric error: non-finite value produced by `{op}`")]
    Numeric { op: &'static str },

    /// Image or latent extents do not fit the latent space.
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A required artifact or stage result is missing.
    #[error("state error: {0}")]
    State(String),

    #[error("missing prerequisite: expected {}", .0.display())]
    MissingFile(PathBuf),

    #[error("training diverged in stage `{stage}` at step {step}")]
    Training { stage: String, step: usize },

    /// A parameter that should be frozen changed.
    #[error("internal assertion failed: {0}")]
    Internal(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Numeric { .. } => "numeric",
            Error::SpecMismatch(_) => "spec_mismatch",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::State(_) | Error::MissingFile(_) => "state",
            Error::Training { .. } => "training",
            Error::Internal(_) => "internal",
            Error::Format(_) | Error::Version { .. } => "format",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Input(_) => "input",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}
pub(crate) use contract;
