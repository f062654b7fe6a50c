//! One adversarial minibatch: K sign-gradient steps on a perturbation with
//! the model-weight gradients of every step summed.

use crate::autodiff::{Graph, Retain};
use crate::error::{ModelError, TensorError, TrainError};
use crate::models::{forward, ModelConfig, ModelParams, ParamVars};
use crate::spectral::{filter_image, make_mask, FrequencyMask};
use crate::tensor::{Real, Tensor};

use super::config::HatConfig;
use super::losses::{argmax_rows, ce_loss, distill_loss, symmetric_kl, Targets};

/// Fixed inputs shared by every step of a minibatch.
pub struct StepInputs<'a, T> {
    pub model: &'a ModelConfig,
    pub params: &'a ModelParams<T>,
    /// Clean standardized batch `N x C x H x W`.
    pub x: &'a Tensor<T>,
    pub targets: &'a Targets,
    /// Teacher logits on the clean batch, when distilling.
    pub teacher: Option<&'a Tensor<T>>,
}

/// Gradients and diagnostics of one step objective.
#[derive(Clone, Debug)]
pub struct StepGradients<T> {
    pub params: ModelParams<T>,
    /// Gradient with respect to the perturbation as added to the input.
    pub input: Tensor<T>,
    pub loss: f64,
    /// Logits on `x + applied`.
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HatMetrics {
    /// Objective of the first (clean) step.
    pub clean_loss: f64,
    /// Clean-batch predictions agreeing with the target argmax.
    pub clean_correct: usize,
    /// Objective value of each step.
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HatStep<T> {
    /// `g_K`, the sum of the per-step weight gradients.
    pub grads: ModelParams<T>,
    /// `delta_K`.
    pub delta: Tensor<T>,
    /// `delta_1 .. delta_K`.
    pub deltas: Vec<Tensor<T>>,
    /// Perturbation added to the input at steps `1 .. K` (filtered when the
    /// frequency mode constrains it).
    pub applied: Vec<Tensor<T>>,
    pub metrics: HatMetrics,
}

fn non_finite(context: String) -> impl FnOnce(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Tensor(source @ TensorError::NonFinite { .. })
        | TrainError::Model(ModelError::Tensor(source @ TensorError::NonFinite { .. })) => {
            TrainError::NonFinite { context, source }
        }
        other => other,
    }
}

fn classification_loss<T: Real>(
    g: &mut Graph<T>,
    logits: crate::autodiff::Var,
    inp: &StepInputs<'_, T>,
) -> Result<crate::autodiff::Var, TrainError> {
    match inp.teacher {
        Some(t) => distill_loss(g, logits, inp.targets, t),
        None => ce_loss(g, logits, inp.targets),
    }
}

/// Gradients of the step-`t` objective (1-based) of a `k`-step minibatch
/// with perturbation `applied` added to the input:
///
/// * `t = 1`: `L(x + applied, y)`,
/// * `t > 1`: `(alpha L(x + applied, y) + beta KL_sym(f(x + applied), f(x))) / (k - 1)`,
///
/// where `L` is cross-entropy, or the distillation loss when a teacher is
/// given. The clean logits are recomputed so the weight gradient flows
/// through both branches of the KL term.
pub fn step_gradients<T: Real>(
    inp: &StepInputs<'_, T>,
    applied: &Tensor<T>,
    t: usize,
    k: usize,
    alpha: f64,
    beta: f64,
) -> Result<StepGradients<T>, TrainError> {
    if t == 0 || t > k {
        return Err(TrainError::Config(format!("step {t} outside 1..={k}")));
    }
    if applied.shape() != inp.x.shape() {
        return Err(TrainError::Config(format!(
            "perturbation {:?} vs batch {:?}",
            applied.shape(),
            inp.x.shape()
        )));
    }
    let mut g = Graph::new();
    let p = ParamVars::register(&mut g, inp.params, true)?;
    let x = g.constant(inp.x.clone())?;
    let d = g.param(applied.clone())?;
    let xa = g.add(x, d)?;
    let adv_logits = forward(&mut g, inp.model, &p, xa)?;
    let loss = if t == 1 {
        classification_loss(&mut g, adv_logits, inp)?
    } else {
        let scale = 1.0 / (k - 1) as f64;
        let ce = classification_loss(&mut g, adv_logits, inp)?;
        let mut total = g.scale(ce, alpha * scale)?;
        if beta != 0.0 {
            let clean_logits = forward(&mut g, inp.model, &p, x)?;
            let kl = symmetric_kl(&mut g, adv_logits, clean_logits)?;
            let kl = g.scale(kl, beta * scale)?;
            total = g.add(total, kl)?;
        }
        total
    };
    let loss_value = g.value(loss).item().and_then(|v| v.to_f64()).unwrap_or(f64::NAN);
    let logits = g.value(adv_logits).clone();
    let mut grads = g.backward_seeded(loss, T::one(), Retain::Free)?;
    let mut out = ModelParams::new();
    for (name, &v) in p.iter() {
        out.insert(
            name.clone(),
            grads.take(v).expect("parameters are differentiable leaves"),
        )?;
    }
    let input = grads.take(d).expect("perturbation is a differentiable leaf");
    Ok(StepGradients {
        params: out,
        input,
        loss: loss_value,
        logits,
    })
}

/// Elementwise `sign`, with `sign(0) = 0`.
pub fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Per-channel pixel-unit bound divided by the standardization divisors.
pub fn channel_bounds(value: f64, channel_std: &[f64]) -> Vec<f64> {
    channel_std.iter().map(|s| value / s).collect()
}

fn band_mask(cfg: &HatConfig, h: usize, w: usize) -> Result<Option<FrequencyMask>, TrainError> {
    match cfg.freq_mode.band() {
        None => Ok(None),
        Some((mode, size)) => Ok(Some(make_mask(h, w, size, mode, cfg.mask_variant)?)),
    }
}

/// Runs the K-step adversarial inner loop on one minibatch.
///
/// `channel_std` converts the pixel-unit `epsilon` and `eta` into the
/// standardized input space, one divisor per channel.
pub fn hat_minibatch<T: Real>(
    inp: &StepInputs<'_, T>,
    cfg: &HatConfig,
    channel_std: &[f64],
) -> Result<HatStep<T>, TrainError> {
    cfg.validate()?;
    let shape = inp.x.shape().to_vec();
    if shape.len() != 4 || channel_std.len() != shape[1] {
        return Err(TrainError::Config(format!(
            "{} channel divisors for batch {shape:?}",
            channel_std.len()
        )));
    }
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let eps = channel_bounds(cfg.epsilon, channel_std);
    let eta = channel_bounds(cfg.eta, channel_std);
    let mask = band_mask(cfg, shape[2], shape[3])?;
    let k = cfg.k;

    let mut delta = Tensor::<T>::zeros(shape.clone());
    let mut grads: Option<ModelParams<T>> = None;
    let mut deltas = Vec::with_capacity(k);
    let mut applied_log = Vec::with_capacity(k);
    let mut metrics = HatMetrics {
        clean_loss: 0.0,
        clean_correct: 0,
        step_losses: Vec::with_capacity(k),
    };
    for t in 1..=k {
        let applied = match &mask {
            Some(m) if t > 1 => filter_image(&delta, m)?,
            _ => delta.clone(),
        };
        let step =
            step_gradients(inp, &applied, t, k, cfg.alpha, cfg.beta).map_err(non_finite(format!("PGD step {t}")))?;
        if !step.loss.is_finite() {
            return Err(TrainError::NonFinite {
                context: format!("PGD step {t}: loss {}", step.loss),
                source: TensorError::NonFinite { op: "loss" },
            });
        }
        if t == 1 {
            metrics.clean_loss = step.loss;
            metrics.clean_correct = count_correct(&step.logits, inp.targets)?;
        }
        metrics.step_losses.push(step.loss);
        grads = Some(match grads {
            None => step.params,
            Some(mut acc) => {
                for ((_, a), (_, b)) in acc.iter_mut().zip(step.params.iter()) {
                    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                acc
            }
        });
        // The filter is linear and self-adjoint, so the gradient with respect
        // to the raw perturbation is the filtered input gradient.
        let gd = match &mask {
            Some(m) => filter_image(&step.input, m)?,
            None => step.input,
        };
        for (i, (d, &gi)) in delta.data_mut().iter_mut().zip(gd.data()).enumerate() {
            let ch = (i / hw) % c;
            let bound = T::lit(eps[ch]);
            let moved = *d + T::lit(eta[ch]) * sign(gi);
            *d = moved.max(-bound).min(bound);
        }
        applied_log.push(applied);
        deltas.push(delta.clone());
    }
    Ok(HatStep {
        grads: grads.expect("k >= 1"),
        delta,
        deltas,
        applied: applied_log,
        metrics,
    })
}

/// Rows whose logit argmax equals the target argmax.
pub fn count_correct<T: Real>(logits: &Tensor<T>, targets: &Targets) -> Result<usize, TrainError> {
    let c = logits.shape().get(1).copied().unwrap_or(1);
    let pred = argmax_rows(logits.data(), c);
    let want = match targets {
        Targets::Hard(l) => l.clone(),
        Targets::Soft { num_classes, rows } => argmax_rows(rows, *num_classes),
    };
    if want.len() != pred.len() {
        return Err(TrainError::Labels(format!(
            "{} targets for {} predictions",
            want.len(),
            pred.len()
        )));
    }
    Ok(pred.iter().zip(&want).filter(|(a, b)| a == b).count())
}
