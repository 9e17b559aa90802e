use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("format: {0}")]
    Format(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parsable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid-input",
            Error::Wav(_) => "wav",
            Error::Format(_) => "format",
            Error::Manifest(_) => "manifest",
            Error::MissingPrerequisite(_) => "missing-prerequisite",
            Error::Numerical(_) => "numerical",
            Error::Stage { source, .. } => source.category(),
            Error::Io(_) => "io",
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
