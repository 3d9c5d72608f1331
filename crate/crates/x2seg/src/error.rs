use thiserror::Error;

pub type Result<T> = std::result::Result<T, X2Error>;

#[derive(Debug, Error)]
pub enum X2Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("yaml error: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

impl X2Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        X2Error::Config { key: key.into(), msg: msg.into() }
    }

    /// CLI exit code contract: 2 config, 3 data, 4 numeric, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            X2Error::Config { .. } => 2,
            X2Error::Data(_) | X2Error::Prompt(_) => 3,
            X2Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
