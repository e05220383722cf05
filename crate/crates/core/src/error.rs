use thiserror::Error;

/// Errors raised by the forecasting pipeline.
#[derive(Error, Debug)]
pub enum HintError {
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("not enough observations: {0}")]
    InsufficientData(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("level {level}: {source}")]
    Level {
        level: u32,
        #[source]
        source: Box<HintError>,
    },
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, HintError>;

impl HintError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HintError::Io { path: path.as_ref().display().to_string(), source }
    }
}
