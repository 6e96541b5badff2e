use alloc::string::String;

/// Every failure the core library reports.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("every score is masked; softmax has no support")]
    AllMasked,
    #[error("zero-norm vector at column {column} of {side}")]
    DegenerateVector { side: &'static str, column: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("weights are not a probability vector: {0}")]
    Simplex(String),
    #[error("label vector has no positive entry")]
    EmptyLabelSet,
    #[error("non-finite evaluation: {0}")]
    Evaluation(String),
    #[error("non-finite gradient in parameter group `{group}`{}", epoch.map(|e| alloc::format!(" at epoch {e}")).unwrap_or_default())]
    Numerical { group: &'static str, epoch: Option<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot build plan grid: {0}")]
    Grid(String),
    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
