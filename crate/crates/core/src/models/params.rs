use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::ModelError;
use crate::tensor::{Real, Tensor};

use super::config::{Init, ModelConfig};

/// Standard deviation of the (pre-truncation) normal used for weights.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts a tensor, rejecting names already present.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<(), ModelError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(ModelError::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Checks names and shapes against `config` exactly.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let specs = config.param_specs()?;
        for (name, spec) in &specs {
            let t = self.get(name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: spec.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !specs.contains_key(*k)) {
            return Err(ModelError::Config(format!("unexpected parameter `{extra}`")));
        }
        if !self.all_finite() {
            return Err(ModelError::Config("parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Fresh parameters: truncated-normal weights (cut at two standard
/// deviations), zero biases, unit norm scales.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut params = ModelParams::new();
    for (name, spec) in config.param_specs()? {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal => (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break T::lit(v);
                    }
                })
                .collect(),
        };
        params.insert(name, Tensor::new(spec.shape, data)?)?;
    }
    Ok(params)
}

/// Graph handles for every parameter of a model.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Places `params` on `g`, as differentiable leaves when `trainable`.
    pub fn register<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> Result<Self, ModelError> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(ParamVars { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
