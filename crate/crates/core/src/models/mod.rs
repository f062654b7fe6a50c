//! Toy Vision Transformer and small residual CNN sharing one logits contract.

mod checkpoint;
mod cnn;
mod config;
mod params;
mod vit;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use cnn::cnn_forward;
pub use config::{CnnConfig, Init, ModelConfig, ParamSpec, Pooling, ViTConfig};
pub use params::{init_params, ModelParams, ParamVars, INIT_STD};
pub use vit::{attention, patchify, patchify_var, vit_forward, VitTrace};

use crate::autodiff::{Graph, Var};
use crate::error::ModelError;
use crate::tensor::{Real, Tensor};

/// Logits for input `x` under either architecture.
pub fn forward<T: Real>(g: &mut Graph<T>, config: &ModelConfig, p: &ParamVars, x: Var) -> Result<Var, ModelError> {
    match config {
        ModelConfig::Vit(c) => vit_forward(g, c, p, x, None),
        ModelConfig::Cnn(c) => cnn_forward(g, c, p, x),
    }
}

/// Evaluates logits for a batch without recording gradients.
pub fn predict<T: Real>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let p = ParamVars::register(&mut g, params, false)?;
    let x = g.constant(batch.clone())?;
    let y = forward(&mut g, config, &p, x)?;
    Ok(g.value(y).clone())
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    /// Pairs `params` with `config` after checking names and shapes.
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self, ModelError> {
        params.validate(&config)?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        predict(&self.config, &self.params, batch)
    }
}
