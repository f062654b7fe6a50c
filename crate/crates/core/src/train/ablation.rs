use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::TrainError;
use crate::eval::evaluate_accuracy;
use crate::models::ModelConfig;
use crate::seed::digest_hex;
use crate::tensor::Real;

use super::config::{FreqMode, HatConfig};
use super::trainer::{train, train_baseline, TrainOptions, TrainState};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub freq_mode: String,
    pub adv_fraction: f64,
    pub test_acc: f64,
    /// Digest of the shared model and base training configuration.
    pub config_hash: String,
}

pub const ABLATION_HEADER: &str = "method,freq_mode,adv_fraction,test_acc,config_hash";

/// Digest identifying a model/training configuration pair.
pub fn config_hash(model: &ModelConfig, cfg: &HatConfig) -> String {
    digest_hex(&format!("{model:?}|{cfg:?}"))
}

/// Trains baseline, low-pass, high-pass and full-frequency runs from the
/// same seed and base configuration, filter size `size` for the banded runs.
pub fn ablation_matrix<T: Real>(
    model: &ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &HatConfig,
    size: f64,
    opts: &TrainOptions<'_, T>,
) -> Result<(Vec<AblationRow>, Vec<TrainState<T>>), TrainError> {
    let hash = config_hash(model, base);
    let mut rows = Vec::new();
    let mut states = Vec::new();
    let variants: [(&str, Option<FreqMode>); 4] = [
        ("baseline", None),
        ("low", Some(FreqMode::Low(size))),
        ("high", Some(FreqMode::High(size))),
        ("full", Some(FreqMode::Full)),
    ];
    for (method, mode) in variants {
        let mut cfg = base.clone();
        let mut run_opts = opts.clone();
        run_opts.out_dir = opts.out_dir.as_ref().map(|d| d.join(method));
        let state = match mode {
            None => train_baseline(model, train_set, &cfg, &run_opts)?,
            Some(m) => {
                cfg.freq_mode = m;
                train(model, train_set, &cfg, &run_opts)?
            }
        };
        let acc = evaluate_accuracy(&state.model, test_set).map_err(|e| TrainError::Config(e.to_string()))?;
        rows.push(AblationRow {
            method: method.into(),
            freq_mode: mode.map_or_else(|| "none".to_string(), |m| m.to_string()),
            adv_fraction: if mode.is_some() { cfg.adv_fraction } else { 0.0 },
            test_acc: acc,
            config_hash: hash.clone(),
        });
        states.push(state);
    }
    Ok((rows, states))
}

pub fn ablation_csv(rows: &[AblationRow], tag: &str) -> String {
    let mut s = format!("# {tag}\n{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.method, r.freq_mode, r.adv_fraction, r.test_acc, r.config_hash
        )
        .unwrap();
    }
    s
}
