use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid structure: {0}")]
    Structure(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("weight matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("normal matrix is numerically singular after regularization")]
    Singular,

    #[error("constraint matrix is rank deficient")]
    RankDeficient,

    #[error("stale QP solution: inputs differ from those that produced it")]
    StaleSolution,

    #[error("matrix has eigenvalue {0:.3e} below the PSD tolerance")]
    NotPsd(f64),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss:.3e} exceeds 1e6 x initial {initial:.3e}")]
    Divergence { epoch: usize, loss: f64, initial: f64 },

    #[error("skill error: {0}")]
    Skill(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("QP failure at rollout step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by numerics rather than malformed input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular
            | Error::NotPsd(_)
            | Error::NonFinite(_)
            | Error::Divergence { .. } => true,
            Error::Rollout { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
