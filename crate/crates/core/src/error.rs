use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    Dimension {
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),

    #[error("simulation diverged at sample {index} (value {value:e})")]
    Divergence { index: usize, value: f64 },

    #[error("excitation design: {0}")]
    Excitation(String),

    #[error("weighting matrix at horizon {horizon} is ill-conditioned (condition number {cond:e})")]
    IllConditioned { horizon: usize, cond: f64 },

    #[error("horizon {requested} not available (gain set covers 1..={max})")]
    Horizon { requested: usize, max: usize },

    #[error("estimator: {0}")]
    Estimator(String),

    #[error("estimator diverged: {0}")]
    EstimatorDiverged(String),

    #[error("record mismatch: {0}")]
    Record(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to parse document: {0}")]
    Parse(String),

    #[error("scenario {scenario}: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by a run blowing up rather than by bad input.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Scenario { source, .. } => source.is_divergence(),
            e => matches!(e, Error::Divergence { .. } | Error::NonFinite(_) | Error::EstimatorDiverged(_)),
        }
    }

    pub fn in_scenario(self, scenario: &str) -> Self {
        Error::Scenario {
            scenario: scenario.to_string(),
            source: Box::new(self),
        }
    }
}
