use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Retain};
use crate::data::{augment_basic, cutmix, mixup, Dataset, SoftLabelBatch};
use crate::error::{ModelError, TensorError, TrainError};
use crate::eval::evaluate_accuracy;
use crate::models::{forward, save_checkpoint, Model, ModelConfig, ModelParams, ParamVars};
use crate::seed::SeedStream;
use crate::tensor::{Real, Tensor};

use super::config::{HatConfig, MixPolicy};
use super::hat::{count_correct, hat_minibatch, StepInputs};
use super::losses::{ce_loss, distill_loss, Targets};
use super::optim::{learning_rate, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Adversarial,
    Normal,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Adversarial => "adv",
            Phase::Normal => "normal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// Equality of everything except the wall-clock time, compared bitwise.
    pub fn same_outcome(&self, other: &EpochMetrics) -> bool {
        self.epoch == other.epoch
            && self.phase == other.phase
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.train_acc.to_bits() == other.train_acc.to_bits()
            && self.eval_acc.map(f64::to_bits) == other.eval_acc.map(f64::to_bits)
    }
}

pub const METRICS_HEADER: &str = "epoch,phase,train_loss,train_acc,eval_acc,wall_seconds";

/// Per-epoch metrics as CSV, preceded by a comment line with `tag`.
pub fn metrics_csv(log: &[EpochMetrics], tag: &str) -> String {
    let mut s = format!("# {tag}\n{METRICS_HEADER}\n");
    for m in log {
        let eval = m.eval_acc.map_or_else(|| "nan".to_string(), |v| v.to_string());
        writeln!(
            s,
            "{},{},{},{},{},{:.3}",
            m.epoch,
            m.phase.as_str(),
            m.train_loss,
            m.train_acc,
            eval,
            m.wall_seconds
        )
        .unwrap();
    }
    s
}

/// Everything a training run mutates.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub log: Vec<EpochMetrics>,
}

/// Inputs of a training run besides the data and hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a, T> {
    pub seed: u64,
    /// Held-out split evaluated after every epoch.
    pub eval: Option<&'a Dataset>,
    /// Directory receiving `metrics.csv` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Teacher for the distillation objective.
    pub teacher: Option<&'a Model<T>>,
    /// Text placed in the metrics CSV comment line.
    pub tag: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Gradient of the plain classification objective on a clean batch.
pub fn ce_gradients<T: Real>(inp: &StepInputs<'_, T>) -> Result<(ModelParams<T>, f64, Tensor<T>), TrainError> {
    let mut g = Graph::new();
    let p = ParamVars::register(&mut g, inp.params, true)?;
    let x = g.constant(inp.x.clone())?;
    let logits = forward(&mut g, inp.model, &p, x)?;
    let loss = match inp.teacher {
        Some(t) => distill_loss(&mut g, logits, inp.targets, t)?,
        None => ce_loss(&mut g, logits, inp.targets)?,
    };
    let value = g.value(loss).item().and_then(|v| v.to_f64()).unwrap_or(f64::NAN);
    let logit_values = g.value(logits).clone();
    let mut grads = g.backward_seeded(loss, T::one(), Retain::Free)?;
    let mut out = ModelParams::new();
    for (name, &v) in p.iter() {
        out.insert(
            name.clone(),
            grads.take(v).expect("parameters are differentiable leaves"),
        )?;
    }
    Ok((out, value, logit_values))
}

struct Trainer<'a, T: Real> {
    data: &'a Dataset,
    cfg: &'a HatConfig,
    opts: &'a TrainOptions<'a, T>,
    stream: SeedStream,
    state: TrainState<T>,
    channel_std: Vec<f64>,
    steps_per_epoch: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    fn new(
        model: &ModelConfig,
        data: &'a Dataset,
        cfg: &'a HatConfig,
        opts: &'a TrainOptions<'a, T>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        model.validate()?;
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        if data.num_classes() != model.num_classes() {
            return Err(TrainError::Labels(format!(
                "dataset has {} classes, model predicts {}",
                data.num_classes(),
                model.num_classes()
            )));
        }
        if data.image_shape() != model.input_shape() {
            return Err(TrainError::Model(ModelError::Input {
                expected: format!("{:?}", model.input_shape()),
                got: data.image_shape().to_vec(),
            }));
        }
        let stream = SeedStream::new(opts.seed);
        let model = Model::init(model.clone(), stream.child("init").seed())?;
        let optimizer = AdamW::new(&model.params, cfg.weight_decay);
        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(Trainer {
            data,
            cfg,
            opts,
            stream,
            state: TrainState {
                model,
                optimizer,
                epoch: 0,
                seed: opts.seed,
                log: Vec::new(),
            },
            channel_std: data.std().iter().map(|&s| s as f64).collect(),
            steps_per_epoch: data.len().div_ceil(cfg.batch_size),
        })
    }

    fn batch(
        &self,
        epoch: usize,
        index: usize,
        idx: &[usize],
        augment: bool,
    ) -> Result<(Tensor<T>, Targets), TrainError> {
        let (mut x, labels) = self.data.batch(idx);
        let aug = &self.cfg.augment;
        let s = self.stream.child("augment").nth(epoch as u64).nth(index as u64);
        if augment && aug.basic {
            x = augment_basic(&x, s.child("crop").seed())?;
        }
        let hard = SoftLabelBatch::from_hard(&labels, self.data.num_classes())?;
        let targets = match aug.mix {
            MixPolicy::Mixup if augment && idx.len() >= 2 => {
                let (mx, y) = mixup(&x, &hard, aug.mixup_alpha, s.child("mix").seed())?;
                x = mx;
                Targets::from(y)
            }
            MixPolicy::Cutmix if augment && idx.len() >= 2 => {
                let (mx, y) = cutmix(&x, &hard, s.child("mix").seed())?;
                x = mx;
                Targets::from(y)
            }
            _ => Targets::Hard(labels),
        };
        Ok((x.cast::<T>(), targets))
    }

    fn epoch(&mut self, adversarial: bool) -> Result<(), TrainError> {
        let start = Instant::now();
        let epoch = self.state.epoch + 1;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.stream.child("shuffle").nth(epoch as u64).rng());
        let total_steps = self.steps_per_epoch * self.cfg.epochs;
        let warmup = (self.steps_per_epoch * self.cfg.warmup_epochs).min(total_steps);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let augment = !adversarial || self.cfg.augment.with_adversarial;
            let (x, targets) = self.batch(epoch, b, idx, augment)?;
            let teacher_logits = match self.opts.teacher {
                Some(t) => Some(t.logits(&x)?),
                None => None,
            };
            let inp = StepInputs {
                model: &self.state.model.config,
                params: &self.state.model.params,
                x: &x,
                targets: &targets,
                teacher: teacher_logits.as_ref(),
            };
            let context = || format!("epoch {epoch}, batch {b}");
            let (grads, loss, hits) = if adversarial {
                let step = hat_minibatch(&inp, self.cfg, &self.channel_std).map_err(|e| match e {
                    TrainError::NonFinite { context: c, source } => TrainError::NonFinite {
                        context: format!("{}, {c}", context()),
                        source,
                    },
                    other => other,
                })?;
                (step.grads, step.metrics.clean_loss, step.metrics.clean_correct)
            } else {
                let (grads, loss, logits) = ce_gradients(&inp).map_err(|e| match e {
                    TrainError::Tensor(source @ TensorError::NonFinite { .. })
                    | TrainError::Model(ModelError::Tensor(source @ TensorError::NonFinite { .. })) => {
                        TrainError::NonFinite {
                            context: context(),
                            source,
                        }
                    }
                    other => other,
                })?;
                (grads, loss, count_correct(&logits, &targets)?)
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    context: format!("{}: loss {loss}", context()),
                    source: TensorError::NonFinite { op: "loss" },
                });
            }
            loss_sum += loss * idx.len() as f64;
            correct += hits;
            let step = (epoch - 1) * self.steps_per_epoch + b;
            let lr = learning_rate(step, total_steps, warmup, self.cfg.lr, self.cfg.min_lr);
            self.state.optimizer.step(&mut self.state.model.params, &grads, lr)?;
        }
        let eval_acc = match self.opts.eval {
            Some(ds) => Some(evaluate_accuracy(&self.state.model, ds).map_err(|e| TrainError::Config(e.to_string()))?),
            None => None,
        };
        self.state.epoch = epoch;
        self.state.log.push(EpochMetrics {
            epoch,
            phase: if adversarial { Phase::Adversarial } else { Phase::Normal },
            train_loss: loss_sum / self.data.len() as f64,
            train_acc: correct as f64 / self.data.len() as f64,
            eval_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = &self.opts.out_dir {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, metrics_csv(&self.state.log, &self.opts.tag)).map_err(io_err(&path))?;
            save_checkpoint(&self.state.model.params, dir.join("last.shat"))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<TrainState<T>, TrainError> {
        if let Some(dir) = &self.opts.out_dir {
            save_checkpoint(&self.state.model.params, dir.join("model.shat"))?;
        }
        Ok(self.state)
    }
}

/// Trains from a fresh initialization: adversarial (HAT) minibatches for the
/// first `ceil(adv_fraction * epochs)` epochs, plain minibatches after.
pub fn train<T: Real>(
    model: &ModelConfig,
    data: &Dataset,
    cfg: &HatConfig,
    opts: &TrainOptions<'_, T>,
) -> Result<TrainState<T>, TrainError> {
    let mut t = Trainer::new(model, data, cfg, opts)?;
    for epoch in 1..=cfg.epochs {
        t.epoch(cfg.is_adversarial(epoch))?;
    }
    t.finish()
}

/// Standard supervised training with the same data order, augmentation and
/// optimizer as [`train`], never perturbing inputs.
pub fn train_baseline<T: Real>(
    model: &ModelConfig,
    data: &Dataset,
    cfg: &HatConfig,
    opts: &TrainOptions<'_, T>,
) -> Result<TrainState<T>, TrainError> {
    let mut t = Trainer::new(model, data, cfg, opts)?;
    for _ in 0..cfg.epochs {
        t.epoch(false)?;
    }
    t.finish()
}
