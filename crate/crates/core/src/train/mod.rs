//! Losses, the adversarial inner loop and the training loops.

mod ablation;
mod config;
mod hat;
mod losses;
mod optim;
mod trainer;

pub use ablation::{ablation_csv, ablation_matrix, config_hash, AblationRow, ABLATION_HEADER};
pub use config::{AugmentConfig, FreqMode, HatConfig, MixPolicy};
pub use hat::{
    channel_bounds, count_correct, hat_minibatch, sign, step_gradients, HatMetrics, HatStep, StepGradients, StepInputs,
};
pub use losses::{argmax_rows, ce_loss, distill_loss, symmetric_kl, Targets, SOFT_LABEL_TOL};
pub use optim::{learning_rate, AdamW};
pub use trainer::{
    ce_gradients, metrics_csv, train, train_baseline, EpochMetrics, Phase, TrainOptions, TrainState, METRICS_HEADER,
};

#[cfg(test)]
mod tests;
