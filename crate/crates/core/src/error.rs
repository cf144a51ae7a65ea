use thiserror::Error;

use crate::seqdata::Stratum;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid outcome at line {line}: {message}")]
    Domain { line: usize, message: String },

    #[error("dataset has no records")]
    EmptyDataset,

    #[error("duplicate subject id `{0}`")]
    DuplicateId(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("time index {t} out of range 1..={n_times}")]
    TimeOutOfRange { t: usize, n_times: usize },

    #[error("stratum {stratum} is not estimable: {reason}")]
    Inestimable { stratum: Stratum, reason: String },

    #[error(
        "blip parameter not identified: design rank {rank} < {k} (column `{dependent_column}` is dependent)"
    )]
    Identifiability {
        rank: usize,
        k: usize,
        dependent_column: String,
    },

    #[error("design is ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("point-effect covariance is not positive definite: {0}; try another variance mode")]
    Weighting(String),

    #[error("regression design is singular: {0}")]
    SingularDesign(String),

    #[error("IRLS did not converge after {iterations} iterations (last iterate {last:?})")]
    NonConvergence { iterations: usize, last: Vec<f64> },

    #[error("constraint matrix H V H' is singular")]
    ConstraintDegenerate,

    #[error("Wald test is degenerate: H cov H' is singular")]
    DegenerateTest,

    #[error("missing marginal covariance; run the bootstrap first")]
    MissingMarginalCovariance,

    #[error("{failed} of {total} bootstrap replicates failed (more than 10%)")]
    Bootstrap { failed: usize, total: usize },

    #[error("{failed} of {total} Monte Carlo replicates failed (more than 10%)")]
    Study { failed: usize, total: usize },

    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors raised by the statistical pipeline itself rather than by input handling.
    pub fn is_statistical(&self) -> bool {
        matches!(
            self,
            Error::Inestimable { .. }
                | Error::Identifiability { .. }
                | Error::IllConditioned { .. }
                | Error::Weighting(_)
                | Error::SingularDesign(_)
                | Error::NonConvergence { .. }
                | Error::ConstraintDegenerate
                | Error::DegenerateTest
                | Error::MissingMarginalCovariance
                | Error::Bootstrap { .. }
                | Error::Study { .. }
                | Error::InvalidHypothesis(_)
        )
    }
}
