//! Frequency analysis and high-frequency adversarial training for small
//! vision transformers.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod parallel;
pub mod seed;
pub mod selftest;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, DataError, EvalError, ModelError, SpectralError, TensorError, TrainError};
pub use tensor::{Real, Tensor};
