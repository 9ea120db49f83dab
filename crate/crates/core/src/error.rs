use std::io;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("3-star review is neutral and excluded from polarity corpora")]
    NeutralExcluded,
    #[error("star rating {0} is outside 1..=5")]
    InvalidStars(i64),
    #[error("review {0:?} has empty text")]
    EmptyText(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("review {id:?}: label {label:?} contradicts {stars} stars")]
    LabelMismatch { id: String, label: String, stars: u8 },
    #[error("review {0:?} has neither a label nor a star rating")]
    MissingLabel(String),
    #[error("stratification impossible: {0}")]
    StratificationImpossible(String),

    #[error("kernel diagonal entry {index} is {value}, expected > 0")]
    DegenerateDiagonal { index: usize, value: f64 },
    #[error("kernel manifests differ: {0}")]
    ManifestMismatch(String),

    #[error("vocabulary is empty after min_count filtering")]
    EmptyVocabulary,
    #[error("format error: {0}")]
    Format(String),
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("document {0:?} is missing from the embedding dump")]
    MissingDocument(String),

    #[error("need at least {k} vectors, got {got}")]
    TooFewVectors { k: usize, got: usize },
    #[error("vector {0} has zero norm; cosine similarity is undefined")]
    ZeroNormVector(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tags the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Stage name, if the error carries one.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
