use std::f64::consts::PI;

use crate::error::TrainError;
use crate::models::ModelParams;
use crate::tensor::{Real, Tensor};

/// Adam with decoupled weight decay. Decay applies to tensors of rank >= 2;
/// biases and norm affines are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ModelParams<T>,
    v: ModelParams<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ModelParams<T>, weight_decay: f64) -> Self {
        let zeros = |p: &ModelParams<T>| {
            let mut z = ModelParams::new();
            for (n, t) in p.iter() {
                z.insert(n.clone(), Tensor::zeros(t.shape().to_vec()))
                    .expect("unique names");
            }
            z
        };
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &ModelParams<T> {
        &self.m
    }

    pub fn second_moments(&self) -> &ModelParams<T> {
        &self.v
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) -> Result<(), TrainError> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (((name, p), (_, m)), (_, v)) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = grads.get(name).map_err(TrainError::Model)?;
            if g.shape() != p.shape() {
                return Err(TrainError::Config(format!(
                    "gradient for `{name}` has shape {:?}",
                    g.shape()
                )));
            }
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gf = gi.to_f64().unwrap();
                let mf = b1 * mi.to_f64().unwrap() + (1.0 - b1) * gf;
                let vf = b2 * vi.to_f64().unwrap() + (1.0 - b2) * gf * gf;
                *mi = T::lit(mf);
                *vi = T::lit(vf);
                let update = (mf / bc1) / ((vf / bc2).sqrt() + self.eps) + decay * pi.to_f64().unwrap();
                *pi = T::lit(pi.to_f64().unwrap() - lr * update);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to
/// `min_lr` at `total` steps.
pub fn learning_rate(step: usize, total: usize, warmup: usize, base: f64, min_lr: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (base - min_lr) * (1.0 + (PI * progress).cos())
}
