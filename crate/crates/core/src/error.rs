use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, unknown tap positions, invalid hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad or unusable input data (empty utterances, all-infeasible shards).
    #[error("data error: {0}")]
    Data(String),

    /// Violation of the round protocol between clients and the server.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The label sequence cannot be aligned to the available frames.
    #[error("infeasible CTC sample: {labels} labels need {required} frames, got {frames}")]
    InfeasibleSample {
        labels: usize,
        required: usize,
        frames: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
