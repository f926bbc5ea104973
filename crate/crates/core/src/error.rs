use thiserror::Error;

pub type Result<T> = std::result::Result<T, GadmmError>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GadmmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("unsupported constraint variant for {0}")]
    UnsupportedVariant(&'static str),

    #[error("inner solver for user {user} failed to decrease the local objective (round {round})")]
    InnerDivergence { user: usize, round: usize },

    #[error("hyperplane step search failed after l = {last_l}")]
    StepSearchFailed { last_l: u32 },

    #[error("matrix of order {0} exceeds the exhaustive principal-minor limit of 20")]
    SizeLimit(usize),

    #[error("insufficient non-degenerate samples ({0} usable)")]
    InsufficientSamples(usize),

    #[error("centralized solver did not converge in {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NotConverged {
        iterations: usize,
        grad_norm: f64,
        best: Vec<f64>,
    },
}

impl GadmmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GadmmError::InvalidArgument(msg.into())
    }

    /// Attach a round index to errors raised inside a local solve.
    pub(crate) fn at_round(self, round: usize) -> Self {
        match self {
            GadmmError::InnerDivergence { user, .. } => GadmmError::InnerDivergence { user, round },
            other => other,
        }
    }
}
