use thiserror::Error;

/// Everything that can go wrong across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not compose.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// Training produced a non-finite value; names the offending parameter.
    #[error("training error: {0}")]
    Training(String),

    /// Bad labels, empty sample sets, and similar data problems.
    #[error("data error: {0}")]
    Data(String),

    /// IDX ingestion failure; messages cite the byte offset where parsing stopped.
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// Layer fusion failed (shape mismatch).
    #[error("merge error: {0}")]
    Merge(String),

    /// The requested fusion is outside the exact-merge envelope.
    #[error("unsupported merge: {0}")]
    UnsupportedMerge(String),

    /// Invalid poisoning specification (trigger does not fit the images, etc).
    #[error("poison spec error: {0}")]
    PoisonSpec(String),

    /// Metric could not be computed (e.g. empty eligible set for ASR).
    #[error("metric error: {0}")]
    Metric(String),

    /// Defense preconditions not met (no mergeable blocks, fewer blocks than requested).
    #[error("defense error: {0}")]
    Defense(String),

    /// Parameter/MAC accounting hit an unknown layer kind.
    #[error("accounting error: {0}")]
    Accounting(String),

    /// Configuration file rejected; names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint checksum mismatch or truncation.
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    /// Checkpoint written by an incompatible format version.
    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(String),

    /// An experiment stage failed; wraps the underlying error.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach the experiment stage name to an error.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
