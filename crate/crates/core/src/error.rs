use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// The variants are coarse on purpose: the CLI maps each family onto a
/// distinct exit status.
#[derive(Debug, Error)]
pub enum HlmError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HlmError>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::HlmError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;

impl HlmError {
    /// The message without the kind prefix.
    pub fn message(&self) -> String {
        match self {
            HlmError::Shape(m)
            | HlmError::Index(m)
            | HlmError::Contract(m)
            | HlmError::Numeric(m)
            | HlmError::Config(m)
            | HlmError::Data(m)
            | HlmError::Format(m) => m.clone(),
            HlmError::Io(e) => e.to_string(),
        }
    }
}
