use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::spectral::{MaskVariant, PassMode};

/// Which frequency band the adversarial perturbation may occupy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FreqMode {
    Full,
    High(f64),
    Low(f64),
}

impl FreqMode {
    /// Pass mode and filter size, or `None` for an unconstrained perturbation.
    pub fn band(self) -> Option<(PassMode, f64)> {
        match self {
            FreqMode::Full => None,
            FreqMode::High(s) => Some((PassMode::High, s)),
            FreqMode::Low(s) => Some((PassMode::Low, s)),
        }
    }
}

impl fmt::Display for FreqMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreqMode::Full => f.write_str("full"),
            FreqMode::High(s) => write!(f, "high({s})"),
            FreqMode::Low(s) => write!(f, "low({s})"),
        }
    }
}

impl FromStr for FreqMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "full" {
            return Ok(FreqMode::Full);
        }
        let parse = |inner: &str| -> Result<f64, String> {
            let inner = inner
                .strip_suffix(')')
                .ok_or_else(|| format!("expected `)` in `{s}`"))?;
            inner
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("bad filter size in `{s}`: {e}"))
        };
        if let Some(rest) = s.strip_prefix("high(") {
            Ok(FreqMode::High(parse(rest)?))
        } else if let Some(rest) = s.strip_prefix("low(") {
            Ok(FreqMode::Low(parse(rest)?))
        } else {
            Err(format!("frequency mode `{s}` is not one of full, high(S), low(S)"))
        }
    }
}

impl TryFrom<String> for FreqMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<FreqMode> for String {
    fn from(m: FreqMode) -> String {
        m.to_string()
    }
}

/// Batch-level label-mixing augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MixPolicy {
    #[default]
    None,
    Mixup,
    Cutmix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Random reflect-padded crop and horizontal flip.
    pub basic: bool,
    pub mix: MixPolicy,
    pub mixup_alpha: f64,
    /// Apply augmentations before crafting perturbations in adversarial
    /// epochs; when false, adversarial epochs see un-augmented batches.
    pub with_adversarial: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            basic: true,
            mix: MixPolicy::None,
            mixup_alpha: crate::data::MIXUP_ALPHA,
            with_adversarial: true,
        }
    }
}

/// Adversarial-training and optimization hyperparameters.
///
/// `epsilon` and `eta` are in `[0, 1]` pixel units and are divided by each
/// channel's standardization divisor before acting on standardized inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HatConfig {
    pub epsilon: f64,
    pub eta: f64,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub adv_fraction: f64,
    pub freq_mode: FreqMode,
    pub mask_variant: MaskVariant,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
}

impl Default for HatConfig {
    fn default() -> Self {
        HatConfig {
            epsilon: 2.0 / 255.0,
            eta: 1.0 / 255.0,
            k: 3,
            alpha: 3.0,
            beta: 0.01,
            adv_fraction: 2.0 / 3.0,
            freq_mode: FreqMode::Full,
            mask_variant: MaskVariant::AsWritten,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 5,
            epochs: 50,
            batch_size: 128,
            augment: AugmentConfig::default(),
        }
    }
}

impl HatConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad(format!(
                "alpha and beta must be >= 0, got {} and {}",
                self.alpha, self.beta
            ));
        }
        if !(0.0..=1.0).contains(&self.adv_fraction) {
            return bad(format!("adv_fraction must lie in [0, 1], got {}", self.adv_fraction));
        }
        if let Some((_, s)) = self.freq_mode.band() {
            if !(s >= 0.0) {
                return bad(format!("filter size must be >= 0, got {s}"));
            }
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return bad(format!(
                "need 0 <= min_lr <= lr and lr > 0, got {} and {}",
                self.min_lr, self.lr
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.augment.mixup_alpha > 0.0) {
            return bad(format!("mixup_alpha must be > 0, got {}", self.augment.mixup_alpha));
        }
        Ok(())
    }

    /// Number of leading adversarial epochs, `ceil(adv_fraction * epochs)`.
    pub fn adversarial_epochs(&self) -> usize {
        // Guard against 2/3 * 300 landing a hair above 200.
        let raw = self.adv_fraction * self.epochs as f64;
        let rounded = raw.round();
        if (raw - rounded).abs() < 1e-9 {
            rounded as usize
        } else {
            raw.ceil() as usize
        }
    }

    /// Whether 1-based `epoch` is adversarial.
    pub fn is_adversarial(&self, epoch: usize) -> bool {
        epoch <= self.adversarial_epochs()
    }
}
