use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::data::{synthetic, SyntheticSpec};
use crate::error::TrainError;
use crate::models::{init_params, ModelConfig, ModelParams, Pooling, ViTConfig};
use crate::spectral::{dft2, make_mask, MaskVariant};
use crate::tensor::Tensor;

fn loss_of(logits: &[f64], shape: [usize; 2], targets: &Targets) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let l = g
        .constant(Tensor::new(shape.to_vec(), logits.to_vec()).unwrap())
        .unwrap();
    let v = ce_loss(&mut g, l, targets)?;
    Ok(g.value(v).item().unwrap())
}

fn skl(p: &[f64], q: &[f64], shape: [usize; 2]) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(shape.to_vec(), p.to_vec()).unwrap()).unwrap();
    let b = g.constant(Tensor::new(shape.to_vec(), q.to_vec()).unwrap()).unwrap();
    let v = symmetric_kl(&mut g, a, b).unwrap();
    g.value(v).item().unwrap()
}

fn distill_of(student: &[f64], labels: &[usize], teacher: &[f64], c: usize) -> f64 {
    let n = labels.len();
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(vec![n, c], student.to_vec()).unwrap()).unwrap();
    let t = Tensor::new(vec![n, c], teacher.to_vec()).unwrap();
    let v = distill_loss(&mut g, s, &Targets::Hard(labels.to_vec()), &t).unwrap();
    g.value(v).item().unwrap()
}

#[test]
fn ce_uniform_logits_is_log_c() {
    for c in [2usize, 3, 10] {
        let l = loss_of(&vec![0.7; 2 * c], [2, c], &Targets::Hard(vec![0, c - 1])).unwrap();
        assert_abs_diff_eq!(l, (c as f64).ln(), epsilon = 1e-12);
    }
}

#[test]
fn ce_vanishes_with_margin() {
    let mut prev = f64::INFINITY;
    for m in [0.0, 1.0, 5.0, 10.0, 20.0] {
        let l = loss_of(&[m, 0.0, 0.0], [1, 3], &Targets::Hard(vec![0])).unwrap();
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-8);
}

#[test]
fn ce_three_class_hand_case() {
    let l = loss_of(&[1.0, 2.0, 3.0], [1, 3], &Targets::Hard(vec![2])).unwrap();
    // log(e^1 + e^2 + e^3) - 3.
    let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    assert_abs_diff_eq!(l, want, epsilon = 1e-12);
    assert_abs_diff_eq!(l, 0.40760596, epsilon = 1e-8);
}

#[test]
fn ce_soft_labels() {
    let soft = Targets::Soft {
        num_classes: 2,
        rows: vec![0.25, 0.75],
    };
    let l = loss_of(&[0.0, 0.0], [1, 2], &soft).unwrap();
    assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-12);
    let bad = Targets::Soft {
        num_classes: 2,
        rows: vec![0.25, 0.7],
    };
    assert!(matches!(loss_of(&[0.0, 0.0], [1, 2], &bad), Err(TrainError::Labels(_))));
    let near = Targets::Soft {
        num_classes: 2,
        rows: vec![0.25, 0.75 + 5e-5],
    };
    assert!(loss_of(&[0.0, 0.0], [1, 2], &near).is_ok());
    assert!(loss_of(&[0.0, 0.0], [1, 2], &Targets::Hard(vec![2])).is_err());
}

#[test]
fn symmetric_kl_cases() {
    assert_eq!(skl(&[1.0, -2.0, 0.5], &[1.0, -2.0, 0.5], [1, 3]), 0.0);
    let p = [0.3, -1.0, 2.0, 0.0, 0.1, 0.2];
    let q = [1.0, 0.5, -0.5, 0.3, 0.3, -0.9];
    assert_abs_diff_eq!(skl(&p, &q, [2, 3]), skl(&q, &p, [2, 3]), epsilon = 1e-15);
    let kl = |a: [f64; 2], b: [f64; 2]| -> f64 { a.iter().zip(&b).map(|(x, y)| x * (x / y).ln()).sum() };
    let want = 0.5 * (kl([0.5, 0.5], [0.25, 0.75]) + kl([0.25, 0.75], [0.5, 0.5]));
    assert_abs_diff_eq!(skl(&[0.0, 0.0], &[0.0, 3f64.ln()], [1, 2]), want, epsilon = 1e-12);
}

#[test]
fn distill_cases() {
    let s = [0.2, 1.5, -0.3];
    let ce = loss_of(&s, [1, 3], &Targets::Hard(vec![1])).unwrap();
    assert_abs_diff_eq!(distill_of(&s, &[1], &[0.0, 4.0, 1.0], 3), ce, epsilon = 1e-12);
    assert_abs_diff_eq!(
        distill_of(&[0.0; 3], &[0], &[0.0, 0.0, 9.0], 3),
        3f64.ln(),
        epsilon = 1e-12
    );
    let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    let want = 0.5 * ((lse - 1.0) + (lse - 3.0));
    assert_abs_diff_eq!(
        distill_of(&[1.0, 2.0, 3.0], &[0], &[0.0, 1.0, 5.0], 3),
        want,
        epsilon = 1e-12
    );
    // Tied teacher logits resolve to the lowest index: class 1 here.
    let tied = distill_of(&[1.0, 2.0, 3.0], &[0], &[0.0, 5.0, 5.0], 3);
    assert_abs_diff_eq!(tied, 0.5 * ((lse - 1.0) + (lse - 2.0)), epsilon = 1e-12);
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::zeros(vec![1, 3])).unwrap();
    assert!(distill_loss(&mut g, s, &Targets::Hard(vec![0]), &Tensor::zeros(vec![1, 4])).is_err());
}

#[test]
fn argmax_ties_pick_lowest() {
    assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 2.0, 2.0, 2.0], 3), vec![1, 0]);
}

fn tiny_model() -> ModelConfig {
    ModelConfig::Vit(ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        pooling: Pooling::Mean,
    })
}

fn batch(seed: u64, n: usize) -> (Tensor<f64>, Targets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(vec![n, 3, 8, 8], |_| rng.gen_range(-1.5..1.5));
    let y = (0..n).map(|_| rng.gen_range(0..3)).collect();
    (x, Targets::Hard(y))
}

const STD: [f64; 3] = [0.247, 0.2435, 0.2616];

fn max_abs_diff(a: &ModelParams<f64>, b: &ModelParams<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|((_, x), (_, y))| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

fn check_delta_bounds(d: &Tensor<f64>, bound: f64) {
    let hw = 64;
    for (i, &v) in d.data().iter().enumerate() {
        let ch = (i / hw) % 3;
        assert!(v.abs() <= bound / STD[ch] + 1e-15, "{v} at {i}");
    }
}

#[test]
fn single_step_is_clean_training() {
    let model = tiny_model();
    let params = init_params::<f64>(&model, 1).unwrap();
    let (x, y) = batch(2, 4);
    let inp = StepInputs {
        model: &model,
        params: &params,
        x: &x,
        targets: &y,
        teacher: None,
    };
    let cfg = HatConfig {
        k: 1,
        adv_fraction: 1.0,
        ..HatConfig::default()
    };
    let step = hat_minibatch(&inp, &cfg, &STD).unwrap();
    let (clean, loss, _) = ce_gradients(&inp).unwrap();
    assert!(max_abs_diff(&step.grads, &clean) < 1e-6);
    assert_eq!(step.metrics.clean_loss, loss);
    assert_eq!(step.deltas.len(), 1);
    check_delta_bounds(&step.delta, cfg.eta.min(cfg.epsilon));
    // A single sign step from zero lands on +-eta_c or stays at 0.
    for (i, &v) in step.delta.data().iter().enumerate() {
        let e = cfg.eta / STD[(i / 64) % 3];
        assert!(v == 0.0 || (v.abs() - e).abs() < 1e-15);
    }
}

#[test]
fn two_step_matches_manual_two_pass() {
    let model = tiny_model();
    let params = init_params::<f64>(&model, 3).unwrap();
    let (x, y) = batch(4, 5);
    let inp = StepInputs {
        model: &model,
        params: &params,
        x: &x,
        targets: &y,
        teacher: None,
    };
    let cfg = HatConfig {
        k: 2,
        alpha: 1.0,
        beta: 0.0,
        ..HatConfig::default()
    };
    let step = hat_minibatch(&inp, &cfg, &STD).unwrap();

    // Pass 1: clean gradient with respect to weights and input.
    let grad_at = |input: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = crate::models::ParamVars::register(&mut g, &params, true).unwrap();
        let xv = g.param(input.clone()).unwrap();
        let logits = crate::models::forward(&mut g, &model, &p, xv).unwrap();
        let loss = ce_loss(&mut g, logits, &y).unwrap();
        let mut gr = g.backward(loss).unwrap();
        let mut out = ModelParams::new();
        for (n, &v) in p.iter() {
            out.insert(n.clone(), gr.take(v).unwrap()).unwrap();
        }
        (out, gr.take(xv).unwrap())
    };
    let (g1, gx) = grad_at(&x);
    let d1 = Tensor::from_fn(x.shape().to_vec(), |i| {
        let ch = (i / 64) % 3;
        let e = cfg.epsilon / STD[ch];
        (cfg.eta / STD[ch] * sign(gx.data()[i])).clamp(-e, e)
    });
    assert_eq!(step.deltas[0], d1);
    let xa = x.zip_map(&d1, |a, b| a + b).unwrap();
    let (g2, _) = grad_at(&xa);
    let mut want = g1.clone();
    for ((_, w), (_, b)) in want.iter_mut().zip(g2.iter()) {
        *w = w.zip_map(b, |p, q| p + q).unwrap();
    }
    assert!(max_abs_diff(&step.grads, &want) < 1e-12);
}

#[test]
fn perturbation_stays_in_ball_and_band() {
    let model = tiny_model();
    let params = init_params::<f64>(&model, 5).unwrap();
    for seed in 0..5 {
        let (x, y) = batch(10 + seed, 3);
        let inp = StepInputs {
            model: &model,
            params: &params,
            x: &x,
            targets: &y,
            teacher: None,
        };
        for mode in [FreqMode::Full, FreqMode::High(4.0), FreqMode::Low(4.0)] {
            let cfg = HatConfig {
                freq_mode: mode,
                ..HatConfig::default()
            };
            let step = hat_minibatch(&inp, &cfg, &STD).unwrap();
            assert_eq!(step.deltas.len(), 3);
            for d in &step.deltas {
                check_delta_bounds(d, cfg.epsilon);
            }
            if let Some((pass, s)) = mode.band() {
                let kept = make_mask(8, 8, s, pass, MaskVariant::AsWritten).unwrap();
                for a in &step.applied[1..] {
                    for plane in a.data().chunks(64) {
                        let spec = dft2(plane, 8, 8).unwrap();
                        let total = spec.energy();
                        let outside: f64 = spec
                            .data()
                            .iter()
                            .zip(kept.grid())
                            .filter(|(_, &m)| m == 0)
                            .map(|(c, _)| c.norm_sqr())
                            .sum();
                        assert!(total > 0.0);
                        assert!(outside < 1e-6 * total, "{outside} of {total}");
                    }
                }
            }
        }
    }
}

#[test]
fn accumulated_gradient_is_sum_of_frozen_steps() {
    let model = tiny_model();
    let params = init_params::<f64>(&model, 6).unwrap();
    let (x, y) = batch(7, 4);
    let inp = StepInputs {
        model: &model,
        params: &params,
        x: &x,
        targets: &y,
        teacher: None,
    };
    for mode in [FreqMode::Full, FreqMode::High(4.0)] {
        let cfg = HatConfig {
            k: 4,
            freq_mode: mode,
            ..HatConfig::default()
        };
        let step = hat_minibatch(&inp, &cfg, &STD).unwrap();
        let mut sum: Option<ModelParams<f64>> = None;
        for (t, applied) in step.applied.iter().enumerate() {
            let sg = step_gradients(&inp, applied, t + 1, cfg.k, cfg.alpha, cfg.beta).unwrap();
            sum = Some(match sum {
                None => sg.params,
                Some(mut acc) => {
                    for ((_, a), (_, b)) in acc.iter_mut().zip(sg.params.iter()) {
                        *a = a.zip_map(b, |p, q| p + q).unwrap();
                    }
                    acc
                }
            });
        }
        assert!(max_abs_diff(&step.grads, &sum.unwrap()) < 1e-5);
    }
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let model = tiny_model();
    let params = init_params::<f64>(&model, 8).unwrap();
    let (mut x, y) = batch(9, 2);
    x.data_mut()[5] = f64::INFINITY;
    let inp = StepInputs {
        model: &model,
        params: &params,
        x: &x,
        targets: &y,
        teacher: None,
    };
    let err = hat_minibatch(&inp, &HatConfig::default(), &STD).unwrap_err();
    assert!(
        matches!(err, TrainError::NonFinite { ref context, .. } if context.contains("PGD step 1")),
        "{err}"
    );
}

#[test]
fn config_defaults_and_validation() {
    let c = HatConfig::default();
    assert_eq!((c.alpha, c.beta, c.k), (3.0, 0.01, 3));
    assert_abs_diff_eq!(c.epsilon, 2.0 / 255.0);
    assert_abs_diff_eq!(c.eta, 1.0 / 255.0);
    c.validate().unwrap();
    for bad in [
        HatConfig {
            k: 0,
            ..HatConfig::default()
        },
        HatConfig {
            eta: 0.0,
            ..HatConfig::default()
        },
        HatConfig {
            alpha: -1.0,
            ..HatConfig::default()
        },
        HatConfig {
            adv_fraction: 1.5,
            ..HatConfig::default()
        },
        HatConfig {
            epochs: 0,
            ..HatConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}

#[test]
fn adversarial_schedule_boundaries() {
    let c = HatConfig {
        epochs: 300,
        adv_fraction: 2.0 / 3.0,
        ..HatConfig::default()
    };
    assert_eq!(c.adversarial_epochs(), 200);
    assert!(c.is_adversarial(1) && c.is_adversarial(200));
    assert!(!c.is_adversarial(201) && !c.is_adversarial(300));
    let c = HatConfig {
        epochs: 10,
        adv_fraction: 0.25,
        ..HatConfig::default()
    };
    assert_eq!(c.adversarial_epochs(), 3);
    assert_eq!(
        HatConfig {
            adv_fraction: 0.0,
            ..c.clone()
        }
        .adversarial_epochs(),
        0
    );
}

#[test]
fn freq_mode_text_round_trip() {
    for m in [FreqMode::Full, FreqMode::High(8.0), FreqMode::Low(2.5)] {
        assert_eq!(m.to_string().parse::<FreqMode>().unwrap(), m);
    }
    assert!("band(3)".parse::<FreqMode>().is_err());
    assert!("high(x)".parse::<FreqMode>().is_err());
}

#[test]
fn learning_rate_schedule_shape() {
    assert_abs_diff_eq!(learning_rate(0, 100, 10, 1.0, 0.0), 0.1);
    assert_abs_diff_eq!(learning_rate(9, 100, 10, 1.0, 0.0), 1.0);
    assert_abs_diff_eq!(learning_rate(10, 100, 10, 1.0, 0.0), 1.0);
    assert_abs_diff_eq!(learning_rate(55, 100, 10, 1.0, 0.0), 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(learning_rate(100, 100, 10, 1.0, 0.1), 0.1, epsilon = 1e-12);
}

#[test]
fn adamw_first_step_is_sign_like() {
    let mut p = ModelParams::<f64>::new();
    p.insert("w", Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap())
        .unwrap();
    p.insert("b", Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()).unwrap();
    let mut g = ModelParams::<f64>::new();
    g.insert("w", Tensor::new(vec![1, 2], vec![0.3, -2.0]).unwrap())
        .unwrap();
    g.insert("b", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
    let mut opt = AdamW::new(&p, 0.1);
    opt.step(&mut p, &g, 0.01).unwrap();
    let w = p.get("w").unwrap().data();
    assert_abs_diff_eq!(w[0], 1.0 - 0.01 * (1.0 + 0.1), epsilon = 1e-9);
    assert_abs_diff_eq!(w[1], -1.0 - 0.01 * (-1.0 - 0.1), epsilon = 1e-9);
    let b = p.get("b").unwrap().data();
    assert_abs_diff_eq!(b[0], 0.5 - 0.01, epsilon = 1e-9);
    assert_eq!(b[1], 0.5);
    assert_eq!(opt.steps_taken(), 1);
}

fn tiny_dataset() -> crate::data::Dataset {
    synthetic(
        &SyntheticSpec {
            n: 24,
            num_classes: 3,
            channels: 3,
            image_size: 8,
            seed: 1,
        },
        2,
        "train",
    )
    .unwrap()
}

fn quick_cfg() -> HatConfig {
    HatConfig {
        epochs: 3,
        batch_size: 8,
        warmup_epochs: 1,
        ..HatConfig::default()
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = tiny_dataset();
    let opts = TrainOptions::<f32> {
        seed: 3,
        eval: Some(&data),
        ..Default::default()
    };
    let cfg = HatConfig {
        adv_fraction: 0.5,
        ..quick_cfg()
    };
    let a = train(&tiny_model(), &data, &cfg, &opts).unwrap();
    let b = train(&tiny_model(), &data, &cfg, &opts).unwrap();
    assert_eq!(a.log.len(), 3);
    assert!(a.log.iter().zip(&b.log).all(|(x, y)| x.same_outcome(y)));
    assert_eq!(a.model.params, b.model.params);
    let phases: Vec<Phase> = a.log.iter().map(|m| m.phase).collect();
    assert_eq!(phases, vec![Phase::Adversarial, Phase::Adversarial, Phase::Normal]);
    let c = train(
        &tiny_model(),
        &data,
        &cfg,
        &TrainOptions {
            seed: 4,
            ..opts.clone()
        },
    )
    .unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn zero_adversarial_fraction_matches_baseline() {
    let data = tiny_dataset();
    let opts = TrainOptions::<f32> {
        seed: 5,
        eval: Some(&data),
        ..Default::default()
    };
    let cfg = HatConfig {
        adv_fraction: 0.0,
        ..quick_cfg()
    };
    let a = train(&tiny_model(), &data, &cfg, &opts).unwrap();
    let b = train_baseline(&tiny_model(), &data, &cfg, &opts).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert!(a.log.iter().zip(&b.log).all(|(x, y)| x.same_outcome(y)));
    assert!(a.log.iter().all(|m| m.phase == Phase::Normal));
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions::<f32> {
        seed: 6,
        eval: Some(&data),
        out_dir: Some(dir.path().join("run")),
        tag: "config_hash=abc seed=6".into(),
        ..Default::default()
    };
    let cfg = HatConfig {
        augment: AugmentConfig {
            mix: MixPolicy::Mixup,
            ..Default::default()
        },
        ..quick_cfg()
    };
    let state = train(&tiny_model(), &data, &cfg, &opts).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# config_hash=abc seed=6");
    assert_eq!(lines[1], METRICS_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("1,adv,"));
    let back = crate::models::load_checkpoint(dir.path().join("run/model.shat")).unwrap();
    assert_eq!(back, state.model.params);
}

#[test]
fn distillation_and_cutmix_training_run() {
    let data = tiny_dataset();
    let teacher = crate::models::Model::<f32>::init(tiny_model(), 77).unwrap();
    let opts = TrainOptions::<f32> {
        seed: 7,
        teacher: Some(&teacher),
        ..Default::default()
    };
    let cfg = HatConfig {
        epochs: 2,
        augment: AugmentConfig {
            mix: MixPolicy::Cutmix,
            with_adversarial: false,
            ..Default::default()
        },
        ..quick_cfg()
    };
    let state = train(&tiny_model(), &data, &cfg, &opts).unwrap();
    assert!(state
        .log
        .iter()
        .all(|m| m.train_loss.is_finite() && m.eval_acc.is_none()));
}

#[test]
fn training_rejects_mismatched_data() {
    let data = tiny_dataset();
    let mut model = tiny_model();
    if let ModelConfig::Vit(c) = &mut model {
        c.num_classes = 4;
    }
    let opts = TrainOptions::<f32>::default();
    assert!(train(&model, &data, &quick_cfg(), &opts).is_err());
}

#[test]
fn ablation_rows_share_config_hash() {
    let data = tiny_dataset();
    let opts = TrainOptions::<f32> {
        seed: 8,
        ..Default::default()
    };
    let cfg = HatConfig {
        epochs: 1,
        ..quick_cfg()
    };
    let (rows, _) = ablation_matrix(&tiny_model(), &data, &data, &cfg, 4.0, &opts).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["baseline", "low", "high", "full"]);
    assert!(rows.iter().all(|r| r.config_hash == rows[0].config_hash));
    let csv = ablation_csv(&rows, "seed=8");
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.contains("high,high(4),"));
}
