//! `hat`: train, evaluate and probe image classifiers in the frequency domain.
//!
//! Every command reads an optional TOML config (`--config`), applies dotted
//! overrides such as `--hat.epsilon=0.01`, echoes the resolved config into
//! its run directory and stamps each CSV with the config hash and seed.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use commands::{MatrixKind, TrainArgs};
use config::{parse_config, parse_override};
use error::{CliError, ErrorKind, Result};

#[derive(Parser, Debug)]
#[command(
    name = "hat",
    version = env!("HAT_VERSION"),
    about = "Frequency-aware adversarial training and evaluation",
    after_help = "Any config key can be overridden as --section.key=value, e.g. --hat.epochs=10 --model.depth=2"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML config file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (default runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Arithmetic precision, f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct CheckpointArg {
    /// Model checkpoint (.shat) to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model with HAT, or plain supervised training with --baseline.
    Train {
        #[command(flatten)]
        common: Common,
        /// Standard training without adversarial minibatches.
        #[arg(long)]
        baseline: bool,
        /// Checkpoint of a teacher for distillation.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Config describing the teacher architecture (default: the student's).
        #[arg(long, requires = "teacher")]
        teacher_config: Option<PathBuf>,
    },
    /// Clean test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
    },
    /// Accuracy on low- or high-pass filtered test images.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
    },
    /// Fourier heat map of error under single-frequency noise.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
    },
    /// Energy spectra of test images and of crafted perturbations.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
    },
    /// Baseline, low-, high- and full-frequency runs from one config.
    Ablation {
        #[command(flatten)]
        common: Common,
    },
    /// High/low spectral ratio of repeated row-stochastic averaging.
    Theorem1 {
        #[command(flatten)]
        common: Common,
        /// Vector length and matrix side.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Largest power of the matrix.
        #[arg(long, default_value_t = 50)]
        kmax: usize,
        #[arg(long, value_enum, default_value_t = MatrixKind::Softmax)]
        matrix: MatrixKind,
    },
    /// Built-in numerical checks.
    Selftest,
}

/// Splits dotted `--a.b=v` overrides from the arguments clap parses.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(Vec<String>, Value)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_dotted = a
            .strip_prefix("--")
            .map(|s| s.split('=').next().unwrap_or("").contains('.'))
            .unwrap_or(false);
        if is_dotted {
            overrides.push(parse_override(&a)?);
        } else {
            rest.push(a);
        }
    }
    Ok((rest, overrides))
}

fn common_overrides(c: &Common) -> Result<Vec<(Vec<String>, Value)>> {
    let mut v = Vec::new();
    if let Some(o) = &c.out {
        v.push((vec!["out_dir".to_string()], Value::String(o.display().to_string())));
    }
    if let Some(s) = c.seed {
        let s = i64::try_from(s).map_err(|_| CliError::new(ErrorKind::Usage, "--seed exceeds i64::MAX"))?;
        v.push((vec!["seed".to_string()], Value::Integer(s)));
    }
    if let Some(p) = &c.precision {
        v.push((vec!["precision".to_string()], Value::String(p.clone())));
    }
    Ok(v)
}

fn load(c: &Common, dotted: &[(Vec<String>, Value)]) -> Result<config::RunConfig> {
    let mut all = dotted.to_vec();
    all.extend(common_overrides(c)?);
    parse_config(c.config.as_deref(), &all)
}

fn run(args: Vec<String>) -> Result<()> {
    let (rest, dotted) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            return Err(CliError::new(ErrorKind::Usage, first));
        }
    };
    match cli.command {
        Command::Train {
            common,
            baseline,
            teacher,
            teacher_config,
        } => {
            let cfg = load(&common, &dotted)?;
            commands::cmd_train(
                &cfg,
                &TrainArgs {
                    baseline,
                    teacher,
                    teacher_config,
                },
            )
        }
        Command::Eval { common, ck } => commands::cmd_eval(&load(&common, &dotted)?, ck.checkpoint.as_deref()),
        Command::Sweep { common, ck } => commands::cmd_sweep(&load(&common, &dotted)?, ck.checkpoint.as_deref()),
        Command::Heatmap { common, ck } => commands::cmd_heatmap(&load(&common, &dotted)?, ck.checkpoint.as_deref()),
        Command::Spectrum { common, ck } => commands::cmd_spectrum(&load(&common, &dotted)?, ck.checkpoint.as_deref()),
        Command::Ablation { common } => commands::cmd_ablation(&load(&common, &dotted)?),
        Command::Theorem1 {
            common,
            n,
            kmax,
            matrix,
        } => commands::cmd_theorem1(&load(&common, &dotted)?, n, kmax, matrix),
        Command::Selftest => {
            if !dotted.is_empty() {
                return Err(CliError::new(ErrorKind::Usage, "selftest takes no config overrides"));
            }
            commands::cmd_selftest()
        }
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
