use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("training diverged: {reason}")]
    TrainingDivergence {
        reason: String,
        /// Best finite-loss state reached before divergence.
        checkpoint: Box<crate::codec::CodecModel>,
    },

    #[error("incompatible model: bitstream expects frozen digest {expected:016x}, model has {found:016x}{}", .record.as_ref().map(|r| format!(" (record {r})")).unwrap_or_default())]
    IncompatibleModel { expected: u64, found: u64, record: Option<String> },

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("phase {phase}: {source}")]
    Phase {
        phase: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_phase(self, phase: usize) -> Self {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase { phase, source: Box::new(e) },
        }
    }
}
