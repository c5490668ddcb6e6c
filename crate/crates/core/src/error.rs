use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid design: {0}")]
    Design(String),

    /// Input data does not parse or does not match the study design.
    #[error("{}", match .line {
        Some(line) => format!("data error at line {line}: {}", .message),
        None => format!("data error: {}", .message),
    })]
    Data {
        line: Option<usize>,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("subgroup {subgroup} is observed at fewer than 2 distinct doses")]
    DegenerateDesign { subgroup: usize },

    /// No multistart candidate met the convergence criterion.
    #[error("fit for subgroup {subgroup} did not converge after {starts} starts (best rss {rss:.6e}, params {best:?})")]
    NonConvergence {
        subgroup: usize,
        starts: usize,
        best: Vec<f64>,
        rss: f64,
    },

    #[error("constraint d(beta) = {delta} infeasible within bounds (residual {residual:.3e}, last iterate {last:?})")]
    ConstraintInfeasible {
        delta: f64,
        residual: f64,
        last: Vec<f64>,
    },

    #[error("bootstrap aborted: {failures} of {total} replicates failed to refit")]
    BootstrapFailure { failures: usize, total: usize },

    #[error("information block of subgroup {0} is singular")]
    SingularInformation(usize),

    #[error("covariance matrix is not positive semi-definite: {0}")]
    DegenerateCovariance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn data(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Data {
            line,
            message: message.into(),
        }
    }
}
