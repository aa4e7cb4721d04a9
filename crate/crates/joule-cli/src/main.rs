//! `joule` — train, sample, and probe energy-based joint classifiers
//! from one seeded TOML config.
//!
//! One config file describes one experiment; one process runs one
//! experiment. There are no environment-variable overrides: everything
//! that affects a run is either in the file or one of the three global
//! flags, and every random stream derives from the single seed. Exit
//! status is 0 on success, 1 on any error, and 2 when training aborts
//! because the sampler lost containment.

mod artifacts;
mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "joule",
    version,
    about = "Energy-based joint classifier training and evaluation"
)]
struct Cli {
    /// Experiment config (TOML). Required by everything except
    /// `sample`, which falls back to stock settings.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoints, a metrics CSV, and a resolved
    /// config snapshot.
    Train,
    /// Run sampling chains from a trained model's energy landscape.
    Sample {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// How many samples to draw.
        #[arg(short, long, default_value_t = 16)]
        n: usize,
        /// Sampler override: sgld, prox-sgld, or pyld.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Accuracy and calibration on a data split.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Which split to score: train or eval.
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Out-of-distribution detection AUROC against a contrast set.
    Ood {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Contrast data: uniform, self, or a generator name.
        #[arg(long, default_value = "uniform")]
        against: String,
        /// Score: log-density or max-softmax.
        #[arg(long, default_value = "log-density")]
        score: String,
    },
    /// Projected-gradient robust accuracy.
    Attack {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Perturbation ball radius.
        #[arg(long, default_value_t = 4.0 / 255.0)]
        radius: f64,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 1.0 / 255.0)]
        step_size: f64,
        /// Ball norm: linf or l2.
        #[arg(long, default_value = "linf")]
        norm: String,
        /// Start each attack at the clean input instead of a random
        /// point in the ball.
        #[arg(long)]
        no_random_start: bool,
        /// Which split to attack: train or eval.
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Fit the class-conditional initializer and write its moments.
    FitInit,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<i32, String> {
    let mut cfg = match (&cli.config, matches!(cli.command, Cmd::Sample { .. })) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, true) => ExperimentConfig::default(),
        (None, false) => return Err("this subcommand needs --config <FILE>".into()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }

    match cli.command {
        Cmd::Train => commands::cmd_train(&cfg),
        Cmd::Sample {
            checkpoint,
            n,
            kind,
        } => commands::cmd_sample(&cfg, &checkpoint, n, kind.as_deref()),
        Cmd::Eval { checkpoint, split } => commands::cmd_eval(&cfg, &checkpoint, &split),
        Cmd::Ood {
            checkpoint,
            against,
            score,
        } => commands::cmd_ood(&cfg, &checkpoint, &against, &score),
        Cmd::Attack {
            checkpoint,
            radius,
            steps,
            step_size,
            norm,
            no_random_start,
            split,
        } => commands::cmd_attack(
            &cfg,
            &checkpoint,
            radius,
            steps,
            step_size,
            &norm,
            no_random_start,
            &split,
        ),
        Cmd::FitInit => commands::cmd_fit_init(&cfg),
    }
}
