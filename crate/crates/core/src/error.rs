use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("divergent function: {0}")]
    DivergentFunction(String),

    #[error("state divergence at step {step}: {detail}")]
    StateDivergence { step: usize, detail: String },

    #[error("gradient divergence in parameter '{0}'")]
    GradientDivergence(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
