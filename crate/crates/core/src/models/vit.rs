use crate::autodiff::{Graph, Var};
use crate::error::{ModelError, TensorError};
use crate::tensor::{permute_data, Real, Tensor};

use super::config::{Pooling, ViTConfig};
use super::params::ParamVars;

const LN_EPS: f64 = 1e-6;

fn patch_check(shape: &[usize], patch: usize) -> Result<(usize, usize, usize, usize), ModelError> {
    if shape.len() != 4 {
        return Err(ModelError::Input {
            expected: "N x C x H x W".into(),
            got: shape.to_vec(),
        });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::Config(format!(
            "{h}x{w} image not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((n, c, h, w))
}

const PATCH_PERM: [usize; 6] = [0, 2, 4, 3, 5, 1];

/// Splits `N x C x H x W` images into `N x T x (P*P*C)` row-major patch
/// tokens, each flattened as `(row, col, channel)`.
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>, ModelError> {
    let (n, c, h, w) = patch_check(images.shape(), patch)?;
    let split = [n, c, h / patch, patch, w / patch, patch];
    let (data, _) = permute_data(images.data(), &split, &PATCH_PERM);
    Ok(Tensor::new(
        vec![n, (h / patch) * (w / patch), patch * patch * c],
        data,
    )?)
}

/// [`patchify`] recorded on a graph.
pub fn patchify_var<T: Real>(g: &mut Graph<T>, x: Var, patch: usize) -> Result<Var, ModelError> {
    let (n, c, h, w) = patch_check(g.shape(x), patch)?;
    let split = g.reshape(x, &[n, c, h / patch, patch, w / patch, patch])?;
    let perm = g.permute(split, &PATCH_PERM)?;
    Ok(g.reshape(perm, &[n, (h / patch) * (w / patch), patch * patch * c])?)
}

/// Scaled dot-product attention over `N x heads x T x d` inputs. Returns the
/// output and the attention probabilities (`N*heads x T x T`).
pub fn attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var), ModelError> {
    let s = g.shape(q).to_vec();
    if s.len() != 4 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!("q {s:?}, k {:?}, v {:?}", g.shape(k), g.shape(v)),
        }
        .into());
    }
    let (b, t, d) = (s[0] * s[1], s[2], s[3]);
    let q = g.reshape(q, &[b, t, d])?;
    let k = g.reshape(k, &[b, t, d])?;
    let v = g.reshape(v, &[b, t, d])?;
    let kt = g.transpose(k)?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let probs = g.softmax(scores, 2)?;
    let out = g.batch_matmul(probs, v)?;
    Ok((g.reshape(out, &s)?, probs))
}

/// Intermediate handles exposed for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct VitTrace {
    /// Attention probabilities of each block, `N*heads x T x T`.
    pub attention: Vec<Var>,
}

fn linear<T: Real>(g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let shape = g.shape(x).to_vec();
    let din = *shape.last().expect("rank >= 1");
    let rows = shape.iter().product::<usize>() / din;
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let dout = g.shape(w)[1];
    let flat = g.reshape(x, &[rows, din])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_broadcast(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = dout;
    Ok(g.reshape(y, &out_shape)?)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let gamma = p.get(&format!("{prefix}.weight"))?;
    let beta = p.get(&format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
}

pub(crate) fn head<T: Real>(g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var, ModelError> {
    linear(g, p, "head", x)
}

fn self_attention<T: Real>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    trace: &mut Option<&mut VitTrace>,
) -> Result<Var, ModelError> {
    let s = g.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let dh = d / cfg.heads;
    let split = |g: &mut Graph<T>, name: &str| -> Result<Var, ModelError> {
        let y = linear(g, p, &format!("{prefix}.{name}"), x)?;
        let y = g.reshape(y, &[n, t, cfg.heads, dh])?;
        Ok(g.permute(y, &[0, 2, 1, 3])?)
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let (out, probs) = attention(g, q, k, v)?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.attention.push(probs);
    }
    let merged = g.permute(out, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[n, t, d])?;
    linear(g, p, &format!("{prefix}.proj"), merged)
}

/// Logits `N x num_classes` for `N x C x H x W` input `x`.
pub fn vit_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &ParamVars,
    x: Var,
    mut trace: Option<&mut VitTrace>,
) -> Result<Var, ModelError> {
    cfg.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1..] != [cfg.channels, cfg.image_size, cfg.image_size] {
        return Err(ModelError::Input {
            expected: format!("N x {} x {} x {}", cfg.channels, cfg.image_size, cfg.image_size),
            got: s,
        });
    }
    let n = s[0];
    let tokens = patchify_var(g, x, cfg.patch_size)?;
    let mut h = linear(g, p, "patch_embed", tokens)?;
    if cfg.pooling == Pooling::ClassToken {
        let cls = g.embedding(p.get("cls_token")?, &vec![0; n])?;
        let cls = g.reshape(cls, &[n, 1, cfg.embed_dim])?;
        h = g.concat(&[cls, h], 1)?;
    }
    h = g.add_broadcast(h, p.get("pos_embed")?)?;
    for b in 0..cfg.depth {
        let prefix = format!("blocks.{b}");
        let a = norm(g, p, &format!("{prefix}.norm1"), h)?;
        let a = self_attention(g, cfg, p, &format!("{prefix}.attn"), a, &mut trace)?;
        h = g.add(h, a)?;
        let m = norm(g, p, &format!("{prefix}.norm2"), h)?;
        let m = linear(g, p, &format!("{prefix}.mlp.fc1"), m)?;
        let m = g.gelu(m)?;
        let m = linear(g, p, &format!("{prefix}.mlp.fc2"), m)?;
        h = g.add(h, m)?;
    }
    h = norm(g, p, "norm", h)?;
    let pooled = match cfg.pooling {
        Pooling::Mean => g.mean_axis(h, 1)?,
        Pooling::ClassToken => {
            let c = g.narrow(h, 1, 0, 1)?;
            g.reshape(c, &[n, cfg.embed_dim])?
        }
    };
    head(g, p, pooled)
}
