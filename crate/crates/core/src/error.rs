use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate embedding: cannot normalize a zero vector")]
    ZeroNorm,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parameter `{0}` is not initialized")]
    MissingParameter(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("index is empty")]
    EmptyIndex,

    #[error("exemplars have no embeddings at level {0}")]
    MissingEmbeddings(u8),

    #[error("no index for level {0}")]
    MissingLevel(u8),

    #[error("unknown ground-truth box")]
    UnknownBox,

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("config error in [{section}] {field}: {detail}")]
    Config {
        section: String,
        field: String,
        detail: String,
    },

    #[error("{path} was produced under a different configuration ({detail}); pass --allow-config-mismatch to use it anyway")]
    StaleArtifact { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }

    pub fn config(
        section: impl Into<String>,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Config {
            section: section.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn at_path(self, path: impl Into<PathBuf>) -> Self {
        Error::Path {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through path context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Path { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 configuration, 3 data or contract, 4 numerical.
    pub fn exit_code(&self) -> u8 {
        match self.root() {
            Error::Config { .. } => 2,
            Error::Diverged { .. } | Error::NonFinite { .. } | Error::ZeroNorm => 4,
            _ => 3,
        }
    }
}
