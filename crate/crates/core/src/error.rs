use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("label {label} out of range for {candidates} candidates")]
    LabelOutOfRange { label: usize, candidates: usize },

    #[error("backward called before any forward computation was recorded")]
    BackwardWithoutForward,

    #[error("backward requires a scalar (1x1) output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero denominator in trajectory probability at position {position}")]
    ZeroDenominator { position: usize },

    #[error("language contract violated: {0}")]
    LanguageContract(String),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("unknown config key '{0}'")]
    UnknownConfigKey(String),

    #[error("invalid value for config key '{key}': {reason}")]
    InvalidConfigValue { key: String, reason: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Short machine-parseable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::BackwardWithoutForward => "backward_without_forward",
            Error::NonScalarOutput { .. } => "non_scalar_output",
            Error::Empty(_) => "empty",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ZeroDenominator { .. } => "zero_denominator",
            Error::LanguageContract(_) => "language_contract",
            Error::Unknown { .. } => "unknown",
            Error::UnknownConfigKey(_) => "unknown_config_key",
            Error::InvalidConfigValue { .. } => "invalid_config_value",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Corrupt { .. } => "corrupt",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
