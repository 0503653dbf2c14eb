use thiserror::Error;

/// Errors produced by the screening engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported sample rate {0} Hz")]
    SampleRate(u32),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("sample out of 16-bit range: {0}")]
    Clipping(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("session aborted: {0}")]
    Aborted(String),

    #[error("malformed packet: {0}")]
    Packet(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("config file: {0}")]
    Toml(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
