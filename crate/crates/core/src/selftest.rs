//! Fast invariant checks, runnable from the command line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Coords};
use crate::data::{synthetic, SyntheticSpec};
use crate::eval::{fourier_heatmap, HeatmapConfig};
use crate::models::{decode, encode, init_params, Model, ModelConfig, Pooling, ViTConfig};
use crate::spectral::{attention_lowpass_decay, dft2, filter_image, idft2, make_mask, MaskVariant, PassMode};
use crate::tensor::Tensor;
use crate::train::{hat_minibatch, HatConfig, StepInputs, Targets};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("dft_roundtrip", dft_roundtrip),
    ("parseval", parseval),
    ("mask_complement", mask_complement),
    ("mask_cardinality", mask_cardinality),
    ("vit_input_gradient", vit_input_gradient),
    ("pgd_bounds", pgd_bounds),
    ("uniform_attention_decay", uniform_attention_decay),
    ("checkpoint_roundtrip", checkpoint_roundtrip),
    ("zero_noise_heatmap", zero_noise_heatmap),
];

/// Names of the checks, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; a panicking check counts as a failure.
pub fn run_selftest() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let out = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            let seconds = t.elapsed().as_secs_f64();
            match out {
                Ok(detail) => CheckResult {
                    name,
                    passed: true,
                    detail,
                    seconds,
                },
                Err(detail) => CheckResult {
                    name,
                    passed: false,
                    detail,
                    seconds,
                },
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_planes(seed: u64, n: usize, side: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect()
}

fn dft_roundtrip() -> Result<String, String> {
    let mut worst = 0.0f64;
    for plane in random_planes(1, 12, 16) {
        let p32: Vec<f32> = plane.iter().map(|&v| v as f32).collect();
        let back: Vec<f32> = idft2(&dft2(&p32, 16, 16).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst = p32
            .iter()
            .zip(&back)
            .fold(worst, |m, (a, b)| m.max((a - b).abs() as f64));
    }
    ensure(worst < 1e-5, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.2e}"))
}

fn parseval() -> Result<String, String> {
    let mut worst = 0.0f64;
    for plane in random_planes(2, 12, 16) {
        let spatial: f64 = plane.iter().map(|v| v * v).sum();
        let spec = dft2(&plane, 16, 16).map_err(|e| e.to_string())?;
        worst = worst.max((spec.energy() / 256.0 - spatial).abs() / spatial);
    }
    ensure(worst < 1e-5, || format!("relative error {worst:e}"))?;
    Ok(format!("relative error {worst:.2e}"))
}

fn mask_complement() -> Result<String, String> {
    let planes = random_planes(3, 3, 16);
    let x = Tensor::new(vec![3, 16, 16], planes.concat()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for s in (0..=16).step_by(2) {
        let lo = make_mask(16, 16, s as f64, PassMode::Low, MaskVariant::AsWritten).map_err(|e| e.to_string())?;
        let hi =
            make_mask(16, 16, (16 - s) as f64, PassMode::High, MaskVariant::AsWritten).map_err(|e| e.to_string())?;
        let a = filter_image(&x, &lo).map_err(|e| e.to_string())?;
        let b = filter_image(&x, &hi).map_err(|e| e.to_string())?;
        let sum = a.zip_map(&b, |p, q| p + q).map_err(|e| e.to_string())?;
        worst = worst.max(sum.max_abs_diff(&x));
    }
    ensure(worst < 1e-5, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.2e}"))
}

fn mask_cardinality() -> Result<String, String> {
    let count = |mode, variant| make_mask(8, 8, 4.0, mode, variant).map(|m| m.count_ones());
    let got = [
        count(PassMode::Low, MaskVariant::AsWritten).map_err(|e| e.to_string())?,
        count(PassMode::Low, MaskVariant::Square).map_err(|e| e.to_string())?,
        count(PassMode::High, MaskVariant::AsWritten).map_err(|e| e.to_string())?,
    ];
    ensure(got == [55, 25, 9], || format!("counts {got:?}"))?;
    Ok(format!("counts {got:?}"))
}

fn tiny_vit() -> ModelConfig {
    ModelConfig::Vit(ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        pooling: Pooling::ClassToken,
    })
}

fn vit_input_gradient() -> Result<String, String> {
    let cfg = tiny_vit();
    let params = init_params::<f64>(&cfg, 7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(vec![2, 3, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let targets = Targets::Hard(vec![0, 2]);
    let f = |g: &mut crate::autodiff::Graph<f64>, v| {
        let p = crate::models::ParamVars::register(g, &params, false).map_err(model_to_tensor)?;
        let logits = crate::models::forward(g, &cfg, &p, v).map_err(model_to_tensor)?;
        crate::train::ce_loss(g, logits, &targets).map_err(|e| crate::error::TensorError::InvalidArgument {
            op: "selftest",
            detail: e.to_string(),
        })
    };
    let r = grad_check(f, &x, 1e-5, 1e-4, Coords::Sampled { count: 40, seed: 9 }).map_err(|e| e.to_string())?;
    ensure(r.passed, || format!("max relative error {:e}", r.max_rel_error))?;
    Ok(format!(
        "max relative error {:.2e} over {} coordinates",
        r.max_rel_error, r.checked
    ))
}

fn model_to_tensor(e: crate::error::ModelError) -> crate::error::TensorError {
    match e {
        crate::error::ModelError::Tensor(t) => t,
        other => crate::error::TensorError::InvalidArgument {
            op: "selftest",
            detail: other.to_string(),
        },
    }
}

fn pgd_bounds() -> Result<String, String> {
    let cfg = tiny_vit();
    let params = init_params::<f64>(&cfg, 10).map_err(|e| e.to_string())?;
    let std = [0.247, 0.2435, 0.2616];
    let hat = HatConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(vec![4, 3, 8, 8], |_| rng.gen_range(-1.5..1.5));
    let targets = Targets::Hard(vec![0, 1, 2, 0]);
    let inp = StepInputs {
        model: &cfg,
        params: &params,
        x: &x,
        targets: &targets,
        teacher: None,
    };
    let step = hat_minibatch(&inp, &hat, &std).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for d in &step.deltas {
        for (i, v) in d.data().iter().enumerate() {
            worst = worst.max(v.abs() * std[(i / 64) % 3]);
        }
    }
    ensure(worst <= hat.epsilon * (1.0 + 1e-12), || {
        format!("max |delta| {worst:e} > {:e}", hat.epsilon)
    })?;
    Ok(format!("max |delta| {worst:.3e} (pixel units)"))
}

fn uniform_attention_decay() -> Result<String, String> {
    let n = 16;
    let a = vec![1.0 / n as f64; n * n];
    let v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + 0.1).collect();
    let r = attention_lowpass_decay(&a, &v, 3).map_err(|e| e.to_string())?;
    ensure(r.iter().all(|&x| x < 1e-12), || format!("ratios {r:?}"))?;
    Ok("ratio 0 at k=1".into())
}

fn checkpoint_roundtrip() -> Result<String, String> {
    let params = init_params::<f32>(&tiny_vit(), 12).map_err(|e| e.to_string())?;
    let bytes = encode(params.iter().map(|(n, t)| (n.as_str(), t)));
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    let same = back.len() == params.len() && back.iter().all(|(n, t)| params.get(n).ok() == Some(t));
    ensure(same, || "decoded tensors differ".into())?;
    let mut rejected = 0;
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        rejected += decode(&bytes[..cut]).is_err() as usize;
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    rejected += decode(&flipped).is_err() as usize;
    ensure(rejected == 6, || format!("{rejected}/6 corrupt inputs rejected"))?;
    Ok(format!("{} tensors, 6 corrupt inputs rejected", params.len()))
}

fn zero_noise_heatmap() -> Result<String, String> {
    let spec = SyntheticSpec {
        n: 12,
        num_classes: 3,
        channels: 3,
        image_size: 8,
        seed: 13,
    };
    let data = synthetic(&spec, 14, "test").map_err(|e| e.to_string())?;
    let model = Model::<f32>::init(tiny_vit(), 15).map_err(|e| e.to_string())?;
    let cfg = HeatmapConfig {
        l2_norm: 0.0,
        radius: Some(2),
        subset: 12,
        seed: 16,
        reuse_symmetry: false,
    };
    let map = fourier_heatmap(&model, &data, &cfg).map_err(|e| e.to_string())?;
    ensure(map.errors.iter().all(|&e| e == map.clean_error), || {
        "a cell differs from the clean error".into()
    })?;
    Ok(format!(
        "{} cells equal clean error {}",
        map.errors.len(),
        map.clean_error
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_selftest();
        assert_eq!(results.len(), check_names().len());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
