use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use hat_core::data::{load_cifar10, load_raw, synthetic_split, Dataset, SyntheticSpec};
use hat_core::eval::{
    evaluate_accuracy, filtered_accuracy_sweep, fourier_heatmap, perturbation_spectrum_report, HeatmapConfig,
};
use hat_core::models::{load_checkpoint, Model, ModelConfig};
use hat_core::seed::{digest_hex, SeedStream};
use hat_core::selftest::run_selftest;
use hat_core::spectral::attention_lowpass_decay;
use hat_core::train::{ablation_csv, ablation_matrix, train, train_baseline, TrainOptions};
use hat_core::Real;

use crate::config::{parse_config, DataKind, Precision, RunConfig};
use crate::error::{io_error, CliError, ErrorKind, Result};

pub const VERSION: &str = env!("HAT_VERSION");

/// Creates the run directory and writes the config echo, seed and version.
pub fn prepare_run(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.out_path(command);
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let mut echo = cfg.clone();
    echo.out_dir = dir.display().to_string();
    write_file(&dir, "config.toml", &echo.to_toml())?;
    write_file(&dir, "seed.txt", &format!("{}\n", cfg.seed))?;
    write_file(&dir, "version.txt", &format!("{VERSION}\n"))?;
    Ok(dir)
}

pub fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| io_error(&p, e))
}

fn synthetic_spec(cfg: &RunConfig) -> SyntheticSpec {
    let s = &cfg.data.synthetic;
    SyntheticSpec {
        n: s.n,
        num_classes: s.num_classes,
        channels: s.channels,
        image_size: s.image_size,
        seed: s.seed,
    }
}

fn check_shape(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let want = cfg.model.input_shape();
    let got = data.image_shape();
    if want != got {
        return Err(CliError::new(
            ErrorKind::InvalidConfig,
            format!("model expects {want:?} images, dataset `{}` has {got:?}", data.split()),
        ));
    }
    Ok(())
}

/// Training and test splits named by the config.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    cfg.require_dataset()?;
    let (mut train_set, test_set) = match cfg.data.kind {
        DataKind::Cifar10 => (
            load_cifar10(&cfg.data.path, "train")?,
            load_cifar10(&cfg.data.path, "test")?,
        ),
        DataKind::Raw => {
            let tr = load_raw(&cfg.data.path, cfg.data.num_classes, "train")?;
            let te = load_raw(&cfg.data.test_path, cfg.data.num_classes, "test")?;
            let te = te.restandardized(tr.mean(), tr.std())?;
            (tr, te)
        }
        DataKind::Synthetic => synthetic_split(&synthetic_spec(cfg), cfg.data.synthetic.n_test)?,
    };
    if cfg.data.limit > 0 && cfg.data.limit < train_set.len() {
        let idx: Vec<usize> = (0..cfg.data.limit).collect();
        train_set = train_set.subset(&idx)?;
    }
    check_shape(cfg, &train_set)?;
    check_shape(cfg, &test_set)?;
    Ok((train_set, test_set))
}

/// Only the test split; CIFAR-10 training batches are not read.
pub fn load_test(cfg: &RunConfig) -> Result<Dataset> {
    cfg.require_dataset()?;
    if cfg.data.kind == DataKind::Cifar10 {
        let te = load_cifar10(&cfg.data.path, "test")?;
        check_shape(cfg, &te)?;
        return Ok(te);
    }
    Ok(load_data(cfg)?.1)
}

fn load_model<T: Real>(config: &ModelConfig, checkpoint: Option<&Path>) -> Result<(Model<T>, String)> {
    let path = checkpoint.ok_or_else(|| {
        CliError::new(
            ErrorKind::MissingInput,
            "missing checkpoint: pass --checkpoint <file.shat>",
        )
    })?;
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    let params = load_checkpoint(path)?.cast::<T>();
    let model = Model::new(config.clone(), params)
        .map_err(|e| CliError::new(ErrorKind::Checkpoint, format!("{}: {e}", path.display())))?;
    let id = digest_hex(&format!("{bytes:?}"));
    Ok((model, id))
}

pub struct TrainArgs {
    pub baseline: bool,
    pub teacher: Option<PathBuf>,
    pub teacher_config: Option<PathBuf>,
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, args),
        Precision::F64 => train_typed::<f64>(cfg, args),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let (train_set, test_set) = load_data(cfg)?;
    let teacher = match &args.teacher {
        None => None,
        Some(p) => {
            let teacher_cfg = match &args.teacher_config {
                Some(c) => parse_config(Some(c), &[])?.model,
                None => cfg.model.clone(),
            };
            Some(load_model::<T>(&teacher_cfg, Some(p))?.0)
        }
    };
    let dir = prepare_run(cfg, "train")?;
    let opts = TrainOptions {
        seed: cfg.seed,
        eval: Some(&test_set),
        out_dir: Some(dir.clone()),
        teacher: teacher.as_ref(),
        tag: cfg.tag("train"),
    };
    let state = if args.baseline {
        train_baseline(&cfg.model, &train_set, &cfg.hat, &opts)?
    } else {
        train(&cfg.model, &train_set, &cfg.hat, &opts)?
    };
    let acc = evaluate_accuracy(&state.model, &test_set)?;
    write_accuracy(&dir, cfg, "train", acc, test_set.len())?;
    println!(
        "trained {} epochs; test accuracy {acc:.4}; outputs in {}",
        state.epoch,
        dir.display()
    );
    Ok(())
}

fn write_accuracy(dir: &Path, cfg: &RunConfig, command: &str, acc: f64, n: usize) -> Result<()> {
    write_file(
        dir,
        "accuracy.csv",
        &format!("# {}\nsplit,accuracy,n\ntest,{acc},{n}\n", cfg.tag(command)),
    )
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, checkpoint),
        Precision::F64 => eval_typed::<f64>(cfg, checkpoint),
    }
}

fn eval_typed<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let (model, _) = load_model::<T>(&cfg.model, checkpoint)?;
    let test_set = load_test(cfg)?;
    let dir = prepare_run(cfg, "eval")?;
    let acc = evaluate_accuracy(&model, &test_set)?;
    write_accuracy(&dir, cfg, "eval", acc, test_set.len())?;
    println!("test accuracy {acc:.4} on {} images", test_set.len());
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => sweep_typed::<f32>(cfg, checkpoint),
        Precision::F64 => sweep_typed::<f64>(cfg, checkpoint),
    }
}

fn sweep_typed<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let (model, id) = load_model::<T>(&cfg.model, checkpoint)?;
    let test_set = load_test(cfg)?;
    let dir = prepare_run(cfg, "sweep")?;
    let e = &cfg.eval;
    let rep = filtered_accuracy_sweep(
        &model,
        &test_set,
        e.sweep_mode,
        e.sweep_sizes.as_deref().expect("resolved"),
        e.sweep_variant,
        &id,
    )?;
    write_file(&dir, "sweep.csv", &rep.to_csv(&cfg.tag("sweep")))?;
    for r in &rep.records {
        println!("{} S={} accuracy {:.4}", rep.mode, r.size, r.accuracy);
    }
    Ok(())
}

pub fn cmd_heatmap(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => heatmap_typed::<f32>(cfg, checkpoint),
        Precision::F64 => heatmap_typed::<f64>(cfg, checkpoint),
    }
}

fn heatmap_typed<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let (model, _) = load_model::<T>(&cfg.model, checkpoint)?;
    let test_set = load_test(cfg)?;
    let dir = prepare_run(cfg, "heatmap")?;
    let e = &cfg.eval;
    let hc = HeatmapConfig {
        l2_norm: e.heatmap_norm.expect("resolved"),
        radius: e.heatmap_radius,
        subset: e.heatmap_subset,
        seed: cfg.seed,
        reuse_symmetry: e.heatmap_reuse_symmetry,
    };
    let map = fourier_heatmap(&model, &test_set, &hc)?;
    write_file(&dir, "heatmap.csv", &map.to_csv(&cfg.tag("heatmap")))?;
    let worst = map.errors.iter().cloned().fold(0.0, f64::max);
    println!(
        "{0}x{0} heat map; clean error {1:.4}, worst cell {worst:.4}",
        map.side(),
        map.clean_error
    );
    Ok(())
}

pub fn cmd_spectrum(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => spectrum_typed::<f32>(cfg, checkpoint),
        Precision::F64 => spectrum_typed::<f64>(cfg, checkpoint),
    }
}

fn spectrum_typed<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let (model, _) = load_model::<T>(&cfg.model, checkpoint)?;
    let test_set = load_test(cfg)?;
    let dir = prepare_run(cfg, "spectrum")?;
    let rep = perturbation_spectrum_report(
        &model,
        &test_set,
        &cfg.hat,
        cfg.eval.spectrum_images,
        cfg.eval.spectrum_size,
    )?;
    write_file(&dir, "spectrum.csv", &rep.to_csv(&cfg.tag("spectrum")))?;
    println!(
        "high-frequency energy ratio (S={}): perturbations {:.4e}, natural images {:.4e}",
        rep.size, rep.perturbation_ratio, rep.natural_ratio
    );
    Ok(())
}

pub fn cmd_ablation(cfg: &RunConfig) -> Result<()> {
    match cfg.precision {
        Precision::F32 => ablation_typed::<f32>(cfg),
        Precision::F64 => ablation_typed::<f64>(cfg),
    }
}

fn ablation_typed<T: Real>(cfg: &RunConfig) -> Result<()> {
    let (train_set, test_set) = load_data(cfg)?;
    let dir = prepare_run(cfg, "ablation")?;
    let opts = TrainOptions::<T> {
        seed: cfg.seed,
        eval: Some(&test_set),
        out_dir: Some(dir.clone()),
        teacher: None,
        tag: cfg.tag("ablation"),
    };
    let (rows, _) = ablation_matrix(
        &cfg.model,
        &train_set,
        &test_set,
        &cfg.hat,
        cfg.eval.ablation_size,
        &opts,
    )?;
    write_file(&dir, "ablation.csv", &ablation_csv(&rows, &cfg.tag("ablation")))?;
    for r in &rows {
        println!("{:<8} {:<10} accuracy {:.4}", r.method, r.freq_mode, r.test_acc);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MatrixKind {
    /// Row softmax of i.i.d. standard-normal logits.
    Softmax,
    /// Every entry 1/n.
    Uniform,
}

/// `(k, ratio)` rows of the high/low spectral ratio of `A^k v`.
pub fn theorem1_csv(n: usize, k_max: usize, matrix: MatrixKind, seed: u64, tag: &str) -> Result<String> {
    if n == 0 || k_max == 0 {
        return Err(CliError::new(ErrorKind::Usage, "--n and --kmax must be positive"));
    }
    let mut rng = SeedStream::new(seed).child("theorem1").rng();
    let a: Vec<f64> = match matrix {
        MatrixKind::Uniform => vec![1.0 / n as f64; n * n],
        MatrixKind::Softmax => {
            let mut a: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
            for row in a.chunks_mut(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - m).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            a
        }
    };
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let ratios = attention_lowpass_decay(&a, &v, k_max)?;
    let mut s = format!("# {tag} n={n} matrix={matrix:?}\nk,ratio\n").to_lowercase();
    for (k, r) in ratios.iter().enumerate() {
        writeln!(s, "{},{r:e}", k + 1).unwrap();
    }
    Ok(s)
}

pub fn cmd_theorem1(cfg: &RunConfig, n: usize, k_max: usize, matrix: MatrixKind) -> Result<()> {
    let csv = theorem1_csv(n, k_max, matrix, cfg.seed, &cfg.tag("theorem1"))?;
    let dir = prepare_run(cfg, "theorem1")?;
    write_file(&dir, "theorem1.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_selftest() -> Result<()> {
    let results = run_selftest();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<26} {} ({:.2}s)", r.name, r.detail, r.seconds);
    }
    println!("selftest: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        let names: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        return Err(CliError::new(
            ErrorKind::SelftestFailed,
            format!("{failed} checks failed: {}", names.join(", ")),
        ));
    }
    Ok(())
}
