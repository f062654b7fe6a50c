use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hat_core::seed::SeedStream;
use rand::Rng;
use rand_distr::StandardNormal;

const TINY: &str = r#"
seed = 5
[model]
kind = "vit"
image_size = 8
patch_size = 4
channels = 3
embed_dim = 16
depth = 1
heads = 2
mlp_ratio = 2
num_classes = 4
[hat]
epochs = 2
batch_size = 32
freq_mode = "high(4)"
[data]
kind = "synthetic"
num_classes = 4
[data.synthetic]
n = 96
n_test = 48
num_classes = 4
image_size = 8
[eval]
sweep_sizes = [2.0, 4.0, 8.0]
heatmap_subset = 24
spectrum_images = 16
spectrum_size = 4.0
"#;

fn hat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hat"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn hat")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(&["selftest"], dir.path());
    ok(&o);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains(" 0 failed"), "{out}");
    assert!(!out.contains("FAIL"));
}

fn naive_ratio(u: &[f64]) -> f64 {
    let n = u.len();
    let mut low = 0.0;
    let mut high = 0.0;
    for k in 0..n {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, x) in u.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            re += x * ang.cos();
            im += x * ang.sin();
        }
        if k == 0 {
            low = re * re + im * im;
        } else {
            high += re * re + im * im;
        }
    }
    (high / low).sqrt()
}

#[test]
fn theorem1_matches_direct_powers() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(
        &["theorem1", "--n", "12", "--kmax", "6", "--seed", "3", "--out", "t"],
        dir.path(),
    );
    ok(&o);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout, read(dir.path().join("t/theorem1.csv")));

    let n = 12;
    let mut rng = SeedStream::new(3).child("theorem1").rng();
    let logits: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let a: Vec<Vec<f64>> = logits
        .chunks(n)
        .map(|r| {
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            r.iter().map(|x| x.exp() / z).collect()
        })
        .collect();
    let mut u = v;
    let rows: Vec<&str> = stdout.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 6);
    for (k, row) in rows.iter().enumerate() {
        u = a.iter().map(|r| r.iter().zip(&u).map(|(x, y)| x * y).sum()).collect();
        let (kk, ratio) = row.split_once(',').unwrap();
        assert_eq!(kk.parse::<usize>().unwrap(), k + 1);
        let got: f64 = ratio.parse().unwrap();
        let want = naive_ratio(&u);
        assert!(
            (got - want).abs() <= 1e-9 * want.max(1e-12),
            "k={} got {got} want {want}",
            k + 1
        );
    }
}

#[test]
fn theorem1_uniform_is_constant_after_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(
        &[
            "theorem1", "--n", "16", "--kmax", "3", "--matrix", "uniform", "--out", "u",
        ],
        dir.path(),
    );
    ok(&o);
    for row in String::from_utf8(o.stdout).unwrap().lines().skip(2) {
        let r: f64 = row.split_once(',').unwrap().1.parse().unwrap();
        assert!(r < 1e-12, "{row}");
    }
}

#[test]
fn eval_commands_require_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["eval", "sweep", "heatmap", "spectrum"] {
        let o = hat(&[cmd], dir.path());
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        let e = stderr(&o);
        assert!(e.starts_with("hat: error[missing-input]:"), "{e}");
        assert_eq!(e.trim_end().lines().count(), 1);
    }
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(&["train", "--hat.epochs=1"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("data.path"), "{}", stderr(&o));
}

#[test]
fn unknown_key_names_nearest() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(&["train", "--hat.epsilonn=0.1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("error[unknown-key]") && e.contains("`hat.epsilon`"), "{e}");

    std::fs::write(dir.path().join("c.toml"), "[hat]\nepochz = 3\n").unwrap();
    let o = hat(&["train", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`hat.epochs`"), "{}", stderr(&o));
}

#[test]
fn type_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(&["train", "--hat.epochs=\"many\""], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[type-mismatch]"), "{}", stderr(&o));
}

#[test]
fn bad_subcommand_is_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = hat(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn example_config_parses() {
    let dir = tempfile::tempdir().unwrap();
    let example = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let o = hat(
        &[
            "theorem1",
            "--config",
            example.to_str().unwrap(),
            "--n",
            "4",
            "--kmax",
            "1",
            "--out",
            "x",
        ],
        dir.path(),
    );
    ok(&o);
    assert!(read(dir.path().join("x/config.toml")).contains("freq_mode = \"high(8)\""));
}

fn csvs(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), read(&p)))
        .collect();
    v.sort();
    v
}

#[test]
fn train_then_rerun_from_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&hat(&["train", "--config", "tiny.toml", "--out", "run"], d));
    for f in [
        "config.toml",
        "seed.txt",
        "version.txt",
        "model.shat",
        "metrics.csv",
        "accuracy.csv",
    ] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    assert_eq!(read(d.join("run/seed.txt")).trim(), "5");
    assert!(read(d.join("run/version.txt")).starts_with(env!("CARGO_PKG_VERSION")));

    // Retraining from the echo reproduces every output except wall time.
    ok(&hat(&["train", "--config", "run/config.toml", "--out", "run2"], d));
    let strip = |s: String| -> Vec<String> {
        s.lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a).to_string())
            .collect()
    };
    assert_eq!(
        strip(read(d.join("run/metrics.csv"))),
        strip(read(d.join("run2/metrics.csv")))
    );
    assert_eq!(
        std::fs::read(d.join("run/model.shat")).unwrap(),
        std::fs::read(d.join("run2/model.shat")).unwrap()
    );

    for cmd in ["eval", "sweep", "heatmap", "spectrum"] {
        let a = format!("{cmd}_a");
        let b = format!("{cmd}_b");
        ok(&hat(
            &[
                cmd,
                "--config",
                "tiny.toml",
                "--checkpoint",
                "run/model.shat",
                "--out",
                &a,
            ],
            d,
        ));
        let echo = format!("{a}/config.toml");
        ok(&hat(
            &[cmd, "--config", &echo, "--checkpoint", "run/model.shat", "--out", &b],
            d,
        ));
        let (ca, cb) = (csvs(&d.join(&a)), csvs(&d.join(&b)));
        assert!(!ca.is_empty(), "{cmd} wrote no csv");
        assert_eq!(ca, cb, "{cmd}");
        for (name, text) in &ca {
            let first = text.lines().next().unwrap();
            assert!(
                first.starts_with(&format!("# {cmd} config=")) && first.contains("seed=5"),
                "{name}: {first}"
            );
        }
    }
}
