//! Run configuration: TOML file, dotted flag overrides, documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use hat_core::data::CIFAR10_RECORDS_PER_FILE;
use hat_core::eval::{scaled_noise_norm, HEATMAP_SUBSET};
use hat_core::models::{CnnConfig, ModelConfig, ViTConfig};
use hat_core::seed::digest_hex;
use hat_core::spectral::{MaskVariant, PassMode};
use hat_core::train::HatConfig;

use crate::error::{io_error, CliError, ErrorKind, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// CIFAR-10 binary batches in `path`.
    Cifar10,
    /// Checkpoint-format containers holding `images` (N x C x H x W, [0, 1])
    /// and `labels`.
    Raw,
    /// The built-in smooth-image task; needs no files.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 2000,
            n_test: 1000,
            num_classes: 10,
            channels: 3,
            image_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// CIFAR-10 directory, or the raw training container.
    pub path: String,
    /// Raw test container.
    pub test_path: String,
    pub num_classes: usize,
    /// Keep only the first `limit` training images; 0 keeps all.
    pub limit: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Cifar10,
            path: String::new(),
            test_path: String::new(),
            num_classes: 10,
            limit: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub sweep_mode: PassMode,
    pub sweep_variant: MaskVariant,
    /// Filter sizes; default 4, 8, ... up to the image side.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_sizes: Option<Vec<f64>>,
    /// Pixel-unit noise norm; defaults to 15.7 scaled by image side / 224.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap_norm: Option<f64>,
    /// Largest frequency offset; defaults to half the image side.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap_radius: Option<usize>,
    pub heatmap_subset: usize,
    pub heatmap_reuse_symmetry: bool,
    pub spectrum_images: usize,
    pub spectrum_size: f64,
    pub ablation_size: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sweep_mode: PassMode::High,
            sweep_variant: MaskVariant::AsWritten,
            sweep_sizes: None,
            heatmap_norm: None,
            heatmap_radius: None,
            heatmap_subset: HEATMAP_SUBSET,
            heatmap_reuse_symmetry: true,
            spectrum_images: 256,
            spectrum_size: 8.0,
            ablation_size: 8.0,
        }
    }
}

/// Keys that may be given but have no serialized default.
const OPTIONAL_KEYS: &[&str] = &["eval.sweep_sizes", "eval.heatmap_norm", "eval.heatmap_radius"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Output directory; empty means `runs/<command>`.
    pub out_dir: String,
    pub model: ModelConfig,
    pub hat: HatConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            out_dir: String::new(),
            model: ModelConfig::Vit(ViTConfig::default()),
            hat: HatConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of everything but the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        digest_hex(&c.to_toml())
    }

    /// Comment text stamped on every emitted CSV.
    pub fn tag(&self, command: &str) -> String {
        format!("{command} config={} seed={}", self.hash(), self.seed)
    }

    pub fn out_path(&self, command: &str) -> PathBuf {
        if self.out_dir.is_empty() {
            Path::new("runs").join(command)
        } else {
            PathBuf::from(&self.out_dir)
        }
    }

    /// Fills defaults that depend on other fields, so the echoed config
    /// states every value used.
    pub fn resolve(&mut self) {
        let side = self.model.input_shape()[1];
        if self.eval.sweep_sizes.is_none() {
            let sizes = (1..=side / 4).map(|k| (4 * k) as f64).collect::<Vec<_>>();
            self.eval.sweep_sizes = Some(if sizes.is_empty() { vec![side as f64] } else { sizes });
        }
        if self.eval.heatmap_norm.is_none() {
            self.eval.heatmap_norm = Some(scaled_noise_norm(side));
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hat.validate()?;
        let invalid = |m: String| Err(CliError::new(ErrorKind::InvalidConfig, m));
        if self.data.num_classes != self.model.num_classes() && self.data.kind != DataKind::Synthetic {
            return invalid(format!(
                "data.num_classes {} differs from the model's {}",
                self.data.num_classes,
                self.model.num_classes()
            ));
        }
        if self.data.kind == DataKind::Synthetic && self.data.synthetic.num_classes != self.model.num_classes() {
            return invalid(format!(
                "data.synthetic.num_classes {} differs from the model's {}",
                self.data.synthetic.num_classes,
                self.model.num_classes()
            ));
        }
        if self.data.kind == DataKind::Cifar10 && self.data.limit > 5 * CIFAR10_RECORDS_PER_FILE {
            return invalid(format!(
                "data.limit {} exceeds the CIFAR-10 training set",
                self.data.limit
            ));
        }
        Ok(())
    }

    /// Errors unless the dataset the config names can be located.
    pub fn require_dataset(&self) -> Result<()> {
        let missing = |what: &str| {
            Err(CliError::new(
                ErrorKind::MissingInput,
                format!("missing dataset path: {what}"),
            ))
        };
        match self.data.kind {
            DataKind::Synthetic => Ok(()),
            DataKind::Cifar10 if self.data.path.is_empty() => missing("data.path (CIFAR-10 directory)"),
            DataKind::Raw if self.data.path.is_empty() => missing("data.path (raw training container)"),
            DataKind::Raw if self.data.test_path.is_empty() => missing("data.test_path (raw test container)"),
            _ => Ok(()),
        }
    }
}

fn model_defaults(kind: &str) -> Option<Value> {
    let m = match kind {
        "vit" => ModelConfig::Vit(ViTConfig::default()),
        "cnn" => ModelConfig::Cnn(CnnConfig::default()),
        _ => return None,
    };
    Some(Value::try_from(m).expect("model config serializes"))
}

/// Parses one `--a.b=value` override. The value is read as a TOML literal
/// and falls back to a bare string.
pub fn parse_override(arg: &str) -> Result<(Vec<String>, Value)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    let (key, raw) = body.split_once('=').ok_or_else(|| {
        CliError::new(
            ErrorKind::Usage,
            format!("override `{arg}` needs the form --key.path=value"),
        )
    })?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::new(ErrorKind::Usage, format!("empty key segment in `{arg}`")));
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::new(
                ErrorKind::TypeMismatch,
                format!("`{}` is not a table", path[..=i].join(".")),
            )
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    candidates.min_by_key(|c| strsim::levenshtein(key, c))
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Checks every key of `given` against `defaults`, recursively, naming the
/// nearest valid key on a miss.
fn check_keys(given: &Table, defaults: &Table, prefix: &str) -> Result<()> {
    let optional: Vec<&str> = OPTIONAL_KEYS
        .iter()
        .filter_map(|o| match o.rsplit_once('.') {
            Some((parent, name)) if parent == prefix => Some(name),
            None if prefix.is_empty() => Some(*o),
            _ => None,
        })
        .collect();
    for (k, v) in given {
        let full = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match defaults.get(k) {
            None if optional.contains(&k.as_str()) => {}
            None => {
                let near = nearest(k, defaults.keys().map(String::as_str).chain(optional.iter().copied()));
                let hint = near.map_or_else(String::new, |n| {
                    let n = if prefix.is_empty() {
                        n.to_string()
                    } else {
                        format!("{prefix}.{n}")
                    };
                    format!("; nearest valid key is `{n}`")
                });
                return Err(CliError::new(
                    ErrorKind::UnknownKey,
                    format!("unknown key `{full}`{hint}"),
                ));
            }
            Some(Value::Table(d)) => match v {
                Value::Table(g) => check_keys(g, d, &full)?,
                other => {
                    return Err(CliError::new(
                        ErrorKind::TypeMismatch,
                        format!("`{full}` must be a table, got {}", type_name(other)),
                    ))
                }
            },
            Some(_) => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Layers `file` text and then `overrides` over the defaults, validates keys
/// and types, and returns the resolved config.
pub fn parse_config_str(file: &str, overrides: &[(Vec<String>, Value)]) -> Result<RunConfig> {
    let mut given: Table = toml::from_str(file)
        .map_err(|e| CliError::new(ErrorKind::InvalidConfig, format!("config is not valid TOML: {e}")))?;
    for (path, value) in overrides {
        set_path(&mut given, path, value.clone())?;
    }
    let mut defaults = Table::try_from(RunConfig::default()).expect("defaults serialize");
    // The model table's valid keys depend on its kind.
    if let Some(kind) = given.get("model").and_then(|m| m.get("kind")) {
        let kind = kind.as_str().ok_or_else(|| {
            CliError::new(
                ErrorKind::TypeMismatch,
                format!("`model.kind` must be a string, got {}", type_name(kind)),
            )
        })?;
        let m = model_defaults(kind).ok_or_else(|| {
            CliError::new(
                ErrorKind::InvalidConfig,
                format!("unknown model.kind `{kind}`; expected `vit` or `cnn`"),
            )
        })?;
        defaults.insert("model".into(), m);
    }
    check_keys(&given, &defaults, "")?;
    merge(&mut defaults, &given);
    let text = toml::to_string(&defaults).expect("merged table serializes");
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
        let msg = e.message().to_string();
        let kind = if msg.contains("invalid type") || msg.contains("invalid value") || msg.contains("unknown variant") {
            ErrorKind::TypeMismatch
        } else {
            ErrorKind::InvalidConfig
        };
        let at = e.span().map(|s| locate(&text, s.start)).unwrap_or_default();
        CliError::new(kind, format!("{at}{msg}"))
    })?;
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Key path of the line containing byte `pos` of serialized TOML.
fn locate(text: &str, pos: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('[') {
            section = t.trim_matches(|c| c == '[' || c == ']').to_string();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len() + 1;
        if offset > pos {
            break;
        }
    }
    if key.is_empty() {
        String::new()
    } else if section.is_empty() {
        format!("`{key}`: ")
    } else {
        format!("`{section}.{key}`: ")
    }
}

pub fn parse_config(file: Option<&Path>, overrides: &[(Vec<String>, Value)]) -> Result<RunConfig> {
    let text = match file {
        Some(p) => std::fs::read_to_string(p).map_err(|e| io_error(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
