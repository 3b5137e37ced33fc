use std::path::PathBuf;

/// Errors raised anywhere in the disagreement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no annotations")]
    NoAnnotations,

    #[error("rating out of scale: {rating} not in [0, {max}]")]
    RatingOutOfScale { rating: i64, max: usize },

    #[error("variance undefined: need at least 2 ratings, got {0}")]
    VarianceUndefined(usize),

    #[error("invalid rating scale: {0}")]
    InvalidScale(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("scale mismatch: expected K={expected}, got K={actual}")]
    ScaleMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("correlation undefined: {0}")]
    CorrelationUndefined(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("duplicate item id: {0}")]
    DuplicateId(String),

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("missing embeddings for {} item(s): {}", .0.len(), .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("uncovered value {value} outside bin edges [{lo}, {hi}]")]
    UncoveredValue { value: f64, lo: f64, hi: f64 },

    #[error("too many malformed lines in {path}: {bad} of {total}; first: {first}")]
    TooManyMalformed {
        path: PathBuf,
        bad: usize,
        total: usize,
        first: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("{0}")]
    NotApplicable(String),

    #[error("loss {loss}, seed {seed}: {source}")]
    Run {
        loss: String,
        seed: u64,
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad input rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        if let Error::Run { source, .. } = self {
            return source.is_validation();
        }
        !matches!(
            self,
            Error::Diverged { .. } | Error::Io(_) | Error::CorrelationUndefined(_)
        )
    }
}
