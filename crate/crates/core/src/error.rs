use thiserror::Error;

#[derive(Debug, Error)]
pub enum MagnetError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric error in {name}: {detail}")]
    Numeric { name: String, detail: String },
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("map generation failed: {0}")]
    Generation(String),
    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },
    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("replay mismatch at tick {tick}: {detail}")]
    Replay { tick: u64, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MagnetError>;

impl MagnetError {
    pub fn dim(layer: impl std::fmt::Display, detail: impl std::fmt::Display) -> Self {
        MagnetError::Dimension(format!("layer {layer}: {detail}"))
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        MagnetError::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}
