use thiserror::Error;

/// Everything that can go wrong across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "cost weights reject the stability condition: max eigenvalue of Q ({q_max:.6}) \
         must be strictly below the min eigenvalue of S ({s_min:.6})"
    )]
    WeightCondition { q_max: f64, s_min: f64 },
    #[error(
        "simulation horizon M = {m} does not clear the contraction bound {bound:.6}; \
         need M >= {required}"
    )]
    HorizonTooShort { m: usize, bound: f64, required: usize },
    #[error("contraction rate {lambda:.6} is not below one; the horizon bound is undefined")]
    NotContractive { lambda: f64 },
    #[error(
        "equilibrium search stalled after {iterations} iterations \
         (state residual {state_residual:.3e}, output residual {output_residual:.3e})"
    )]
    EquilibriumNotConverged {
        iterations: usize,
        state_residual: f64,
        output_residual: f64,
    },
    #[error("equilibrium is not strictly inside its admissible box: {0}")]
    EquilibriumOnBoundary(String),
    #[error("no observer gain achieves a contraction rate below one (best endpoint rate {best:.6})")]
    ObserverInfeasible { best: f64 },
    #[error("linear program is infeasible")]
    LpInfeasible,
    #[error("linear program is unbounded")]
    LpUnbounded,
    #[error("simplex did not terminate within {0} pivots")]
    LpStalled(usize),
    #[error("every sampled trajectory pair had coincident initial states; cannot estimate a rate")]
    DegeneratePairs,
    #[error("dataset is empty or has an episode with no samples")]
    EmptyDataset,
    #[error("unknown plant kind `{0}`; expected `gru-echo` or `surrogate`")]
    UnknownPlantKind(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
