use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse config: {0}")]
    Parse(String),

    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown state index {0}")]
    UnknownState(usize),

    #[error("unknown route index {0}")]
    UnknownRoute(usize),

    #[error("negative flow {value} on route {route}")]
    NegativeFlow { route: usize, value: f64 },

    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("solver did not converge after {iterations} iterations (best residual {best_residual:e})")]
    NonConvergence {
        iterations: usize,
        best_residual: f64,
    },

    #[error("no obedient policy found across {restarts} restarts (most feasible min slack {min_slack:e})")]
    Infeasible {
        restarts: usize,
        min_slack: f64,
        candidate: Vec<Vec<f64>>,
    },

    #[error("no record under key (state {state}, rating {rating:.1})")]
    MissingKey { state: usize, rating: f64 },

    #[error("session is {actual}, expected {expected}")]
    Phase {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("persistence failure after round {last_durable_round}: {source}")]
    Persistence {
        last_durable_round: usize,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
