use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unsupported dimension {got}: {context}")]
    UnsupportedDimension { got: usize, context: &'static str },

    #[error("tolerance not met: achieved {achieved}, requested {requested}")]
    ToleranceNotMet { achieved: f64, requested: f64 },

    #[error("particle allocation infeasible: {0}")]
    Allocation(String),

    #[error("problem size over cap: {got} > {cap} ({context})")]
    SizeCap {
        got: usize,
        cap: usize,
        context: &'static str,
    },

    #[error("bracket failure: {0}")]
    Bracket(String),

    #[error("no convergence after {iterations} iterations (residual {residual})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("constraint infeasible: {0}")]
    ConstraintInfeasible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code per the CLI contract: 2 for validation problems,
    /// 3 for numeric non-convergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_)
            | Error::Config(_)
            | Error::DimensionMismatch(..)
            | Error::GridMismatch(_)
            | Error::UnsupportedDimension { .. }
            | Error::SizeCap { .. } => 2,
            Error::ToleranceNotMet { .. }
            | Error::NonConvergence { .. }
            | Error::Quadrature(_)
            | Error::Bracket(_)
            | Error::ConstraintInfeasible(_)
            | Error::Allocation(_) => 3,
            Error::Io { .. } => 1,
        }
    }
}
