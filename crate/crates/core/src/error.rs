use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("truth required: event at t={t} carries no truth label")]
    TruthRequired { t: u64 },

    #[error("wealth exhausted: stream halted before t={t}")]
    WealthExhausted { t: u64 },

    #[error("invalid power bound {value} at t={t}: must lie in (0, 1]")]
    InvalidPowerBound { t: u64, value: f64 },

    #[error("invalid significance level {value} at t={t}: must lie in (0, 1]")]
    InvalidLevel { t: u64, value: f64 },

    #[error("beta sequence index must be >= 1, got {0}")]
    BetaIndex(u64),

    #[error("expected {expected} group indices (one per layer), got {got}")]
    LayerCount { expected: usize, got: usize },

    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),

    #[error("non-finite test statistic {0}")]
    NonFinite(f64),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("aggregation needs at least one replicate")]
    NoReplicates,

    #[error("index {index} exceeds log length {len}")]
    LogIndex { index: usize, len: usize },

    #[error("nothing to emit: {0}")]
    EmptyTable(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
