use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evaluation produced a non-finite value: {0}")]
    Evaluation(String),

    #[error("non-finite activation in {layer}")]
    Numeric { layer: String },

    #[error("POG undefined for a total vehicle count of zero")]
    UndefinedPog,

    #[error("cannot place {requested} crashes in {available} distinct timesteps")]
    Capacity { requested: usize, available: usize },

    #[error("missing leg snapshot for intersection {intersection} approach {approach} at {timestamp}")]
    Gap {
        intersection: String,
        approach: char,
        timestamp: String,
    },

    #[error("labels contain a single class; at least two are required")]
    DegenerateLabels,

    #[error("resampling failed: {0}")]
    Resampling(String),

    #[error("{players} players exceed the exact Shapley limit of {limit}; use shapley_sampled")]
    TooManyPlayers { players: usize, limit: usize },

    #[error("{metric} is undefined: its denominator is zero")]
    UndefinedMetric { metric: &'static str },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
