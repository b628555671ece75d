use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Io(#[from] std::io::Error),

    /// Header or column mapping problem in a KPI log.
    #[error("{0}")]
    Schema(String),

    #[error("{0}")]
    Parameter(String),

    /// Operand shapes that do not compose.
    #[error("{0}")]
    Dimension(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    Numeric { op: String },

    /// API misuse, such as stepping a frozen extractor.
    #[error("{0}")]
    Contract(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Init(String),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Checkpoint(String),

    #[error(
        "{stage} produced a non-finite loss at batch {batch} (last finite loss: {last_finite})"
    )]
    Diverged {
        stage: String,
        batch: usize,
        last_finite: String,
    },
}

impl Error {
    /// Stable machine-readable class name; `Display` gives only the message.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Schema(_) => "schema",
            Error::Parameter(_) => "parameter",
            Error::Dimension(_) => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Init(_) => "init",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("json: {e}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(format!("csv: {e}"))
    }
}
