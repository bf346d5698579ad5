//! Batch command-line interface: dataset preparation, training, evaluation,
//! calibration, uncertainty, explanation and report emission.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Cfg, CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "voxbayes",
    version,
    about = "Bayesian 3D convolutional classifiers over volumetric scans"
)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug)]
struct Common {
    /// Config file: key=value lines or a manifest.json from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for every artifact of this run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed for all randomness in this command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalData {
    /// Trained checkpoint stem (without .json/.bin extension).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset manifest (path,source_class).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Hounsfield window id (W1..W4).
    #[arg(long)]
    window: Option<String>,
    /// Monte-Carlo forwards for Bernoulli-mean probability reporting.
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic blob dataset used by the acceptance suite.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of volumes.
        #[arg(long)]
        n: Option<usize>,
        /// Volume shape, e.g. 32x32x16.
        #[arg(long)]
        shape: Option<String>,
        /// Hounsfield window used to encode intensities.
        #[arg(long)]
        window: Option<String>,
    },
    /// Split a dataset manifest 70/20/10 into train/test/val manifests.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest to split.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the reference model on a labelled dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training manifest.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Validation manifest.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Hounsfield window id (W1..W4).
        #[arg(long)]
        window: Option<String>,
        /// Bayesian variant: none|reparam|local_reparam|flipout|mnf.
        #[arg(long)]
        variant: Option<String>,
        /// Probability head: sigmoid|bernoulli_mean.
        #[arg(long)]
        head: Option<String>,
        /// Keep dropout active at prediction time (MC dropout).
        #[arg(long)]
        mc_dropout: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Early-stopping patience on validation accuracy.
        #[arg(long)]
        patience: Option<usize>,
        /// Apply stochastic augmentation to training samples.
        #[arg(long)]
        augment: bool,
    },
    /// Metrics CSV over a threshold grid.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
        /// Strictly increasing thresholds, e.g. 0.4,0.5,0.6,0.7,0.8.
        #[arg(long)]
        thresholds: Option<String>,
        /// Reliability bins for the ECE column.
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Reliability bins, ECE and the reliability diagram.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
        /// Decision threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Monte-Carlo predictive samples, intervals and review flags.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalData,
        /// Monte-Carlo forwards per input.
        #[arg(long)]
        t: Option<usize>,
        /// Interval level, e.g. 0.95.
        #[arg(long)]
        level: Option<f64>,
        /// Interval width above which a prediction is flagged.
        #[arg(long)]
        width_threshold: Option<f64>,
    },
    /// Shapley-value voxel-patch attribution for one scan.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint stem.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// NIfTI volume to explain.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Hounsfield window id.
        #[arg(long)]
        window: Option<String>,
        /// Patch grid, e.g. 8x8x4.
        #[arg(long)]
        grid: Option<String>,
        /// Permutations for the sampled estimator.
        #[arg(long)]
        permutations: Option<usize>,
        /// Exact enumeration (needs at most 12 patches).
        #[arg(long)]
        exact: bool,
    },
}

fn apply_common(cfg: &mut Cfg, common: &Common, command: &str) -> CliResult<()> {
    if let Some(path) = &common.config {
        cfg.merge_file(path, command)?;
    }
    cfg.set_flag("out", &common.out.as_ref().map(|p| p.display().to_string()));
    cfg.set_flag("seed", &common.seed);
    Ok(())
}

fn apply_eval(cfg: &mut Cfg, eval: &EvalData) {
    cfg.set_flag(
        "eval.checkpoint",
        &eval.checkpoint.as_ref().map(|p| p.display().to_string()),
    );
    cfg.set_flag("data.test", &eval.data.as_ref().map(|p| p.display().to_string()));
    cfg.set_flag("data.window", &eval.window);
    cfg.set_flag("eval.mc_samples", &eval.mc_samples);
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth { common, n, shape, window } => {
            let mut cfg = Cfg::new();
            cfg.set_default("synth.n", 200);
            cfg.set_default("synth.shape", "32x32x16");
            cfg.set_default("seed", 7);
            cfg.set_default("data.window", "W4");
            apply_common(&mut cfg, common, "synth")?;
            cfg.set_flag("synth.n", n);
            cfg.set_flag("synth.shape", shape);
            cfg.set_flag("data.window", window);
            commands::synth(&cfg)
        }
        Command::Prepare { common, manifest } => {
            let mut cfg = Cfg::new();
            cfg.set_default("seed", 7);
            apply_common(&mut cfg, common, "prepare")?;
            cfg.set_flag(
                "data.manifest",
                &manifest.as_ref().map(|p| p.display().to_string()),
            );
            commands::prepare(&cfg)
        }
        Command::Train {
            common,
            train,
            val,
            window,
            variant,
            head,
            mc_dropout,
            epochs,
            learning_rate,
            batch_size,
            patience,
            augment,
        } => {
            let mut cfg = Cfg::new();
            cfg.set_default("seed", 7);
            cfg.set_default("data.window", "W4");
            cfg.set_default("model.variant", "none");
            cfg.set_default("model.head", "sigmoid");
            cfg.set_default("train.learning_rate", 0.001);
            cfg.set_default("train.epochs", 10);
            cfg.set_default("train.batch_size", 2);
            cfg.set_default("train.patience", 15);
            cfg.set_default("train.augment.rotate_deg", 20.0);
            cfg.set_default("train.augment.noise_sigma", 0.01);
            apply_common(&mut cfg, common, "train")?;
            cfg.set_flag("data.train", &train.as_ref().map(|p| p.display().to_string()));
            cfg.set_flag("data.val", &val.as_ref().map(|p| p.display().to_string()));
            cfg.set_flag("data.window", window);
            cfg.set_flag("model.variant", variant);
            cfg.set_flag("model.head", head);
            cfg.set_flag_bool("model.mc_dropout", *mc_dropout);
            cfg.set_flag("train.epochs", epochs);
            cfg.set_flag("train.learning_rate", learning_rate);
            cfg.set_flag("train.batch_size", batch_size);
            cfg.set_flag("train.patience", patience);
            cfg.set_flag_bool("train.augment", *augment);
            commands::train_cmd(&cfg)
        }
        Command::Evaluate { common, eval, thresholds, bins } => {
            let mut cfg = Cfg::new();
            cfg.set_default("seed", 7);
            cfg.set_default("data.window", "W4");
            cfg.set_default("eval.thresholds", "0.4,0.5,0.6,0.7,0.8");
            cfg.set_default("eval.bins", 10);
            cfg.set_default("eval.mc_samples", 200);
            apply_common(&mut cfg, common, "evaluate")?;
            apply_eval(&mut cfg, eval);
            cfg.set_flag("eval.thresholds", thresholds);
            cfg.set_flag("eval.bins", bins);
            commands::evaluate(&cfg)
        }
        Command::Calibrate { common, eval, threshold, bins } => {
            let mut cfg = Cfg::new();
            cfg.set_default("seed", 7);
            cfg.set_default("data.window", "W4");
            cfg.set_default("calibrate.threshold", 0.4);
            cfg.set_default("eval.bins", 10);
            cfg.set_default("eval.mc_samples", 200);
            apply_common(&mut cfg, common, "calibrate")?;
            apply_eval(&mut cfg, eval);
            cfg.set_flag("calibrate.threshold", threshold);
            cfg.set_flag("eval.bins", bins);
            commands::calibrate(&cfg)
        }
        Command::Uncertainty { common, eval, t, level, width_threshold } => {
            let mut cfg = Cfg::new();
            cfg.set_default("seed", 7);
            cfg.set_default("data.window", "W4");
            cfg.set_default("uncertainty.t", 200);
            cfg.set_default("uncertainty.level", 0.95);
            cfg.set_default("uncertainty.width_threshold", 0.3);
            cfg.set_default("eval.mc_samples", 200);
            apply_common(&mut cfg, common, "uncertainty")?;
            apply_eval(&mut cfg, eval);
            cfg.set_flag("uncertainty.t", t);
            cfg.set_flag("uncertainty.level", level);
            cfg.set_flag("uncertainty.width_threshold", width_threshold);
            commands::uncertainty(&cfg)
        }
        Command::Explain {
            common,
            checkpoint,
            input,
            window,
            grid,
            permutations,
            exact,
        } => {
            let mut cfg = Cfg::new();
            cfg.set_default("seed", 7);
            cfg.set_default("data.window", "W4");
            cfg.set_default("explain.grid", "8x8x4");
            cfg.set_default("explain.permutations", 200);
            apply_common(&mut cfg, common, "explain")?;
            cfg.set_flag(
                "eval.checkpoint",
                &checkpoint.as_ref().map(|p| p.display().to_string()),
            );
            cfg.set_flag("explain.input", &input.as_ref().map(|p| p.display().to_string()));
            cfg.set_flag("data.window", window);
            cfg.set_flag("explain.grid", grid);
            cfg.set_flag("explain.permutations", permutations);
            cfg.set_flag_bool("explain.exact", *exact);
            commands::explain(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
