use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] rainsense_nn::NnError),

    #[error(transparent)]
    Data(#[from] rainsense_core::Error),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("checkpoint does not describe a model: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
