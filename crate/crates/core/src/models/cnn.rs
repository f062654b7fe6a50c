use crate::autodiff::{Graph, Var};
use crate::error::ModelError;
use crate::tensor::Real;

use super::config::CnnConfig;
use super::params::ParamVars;
use super::vit::head;

const GN_EPS: f64 = 1e-5;

fn group_norm<T: Real>(
    g: &mut Graph<T>,
    cfg: &CnnConfig,
    p: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var, ModelError> {
    let gamma = p.get(&format!("{prefix}.weight"))?;
    let beta = p.get(&format!("{prefix}.bias"))?;
    Ok(g.group_norm(x, gamma, beta, cfg.groups, GN_EPS)?)
}

/// Logits `N x num_classes` for `N x C x H x W` input `x`.
pub fn cnn_forward<T: Real>(g: &mut Graph<T>, cfg: &CnnConfig, p: &ParamVars, x: Var) -> Result<Var, ModelError> {
    cfg.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1..] != [cfg.channels, cfg.image_size, cfg.image_size] {
        return Err(ModelError::Input {
            expected: format!("N x {} x {} x {}", cfg.channels, cfg.image_size, cfg.image_size),
            got: s,
        });
    }
    let mut h = g.conv2d(x, p.get("stem.conv.weight")?, 1, 1)?;
    h = group_norm(g, cfg, p, "stem.norm", h)?;
    h = g.relu(h)?;
    let mut cin = cfg.widths[0];
    for (stage, &cout) in cfg.widths.iter().enumerate() {
        let pre = format!("stages.{stage}");
        let stride = CnnConfig::stride(stage);
        let mut y = g.conv2d(h, p.get(&format!("{pre}.conv1.weight"))?, stride, 1)?;
        y = group_norm(g, cfg, p, &format!("{pre}.norm1"), y)?;
        y = g.relu(y)?;
        y = g.conv2d(y, p.get(&format!("{pre}.conv2.weight"))?, 1, 1)?;
        y = group_norm(g, cfg, p, &format!("{pre}.norm2"), y)?;
        let shortcut = if stride != 1 || cin != cout {
            g.conv2d(h, p.get(&format!("{pre}.shortcut.weight"))?, stride, 0)?
        } else {
            h
        };
        y = g.add(y, shortcut)?;
        h = g.relu(y)?;
        cin = cout;
    }
    let hs = g.shape(h).to_vec();
    let flat = g.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
    let pooled = g.mean_axis(flat, 2)?;
    head(g, p, pooled)
}
