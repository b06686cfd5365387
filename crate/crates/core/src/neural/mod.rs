//! A small neural-network engine: dense and Elman recurrent layers, inverted
//! dropout, MSE and pinball losses, exact backpropagation and Adam.

mod adam;
mod loss;
mod network;
mod persist;
mod spec;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{loss, loss_grad, LossKind};
pub use network::{init_params, Mode, Network, NetworkParams};
pub use persist::{
    decode_params, encode_params, read_params, read_params_raw, write_params, PARAMS_FORMAT_VERSION, PARAMS_MAGIC,
};
pub use spec::{Activation, Layer, NetworkSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("empty input")]
    EmptyInput,
    #[error("parameter file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
