//! `tcsep` command line.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcsep::Error;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "tcsep", version, about = "Subject-conditioned beta-TCVAE source separation with an InfoMax baseline")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed (falls back to $TCSEP_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for training.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override a config key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Subjects CSV (default: next to --out).
        #[arg(long)]
        subjects: Option<PathBuf>,
        /// linear, pnl or mlp.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        k_true: Option<usize>,
        #[arg(long)]
        features: Option<usize>,
        #[arg(long)]
        n_subjects: Option<usize>,
        #[arg(long)]
        timepoints: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train the model; writes checkpoint.tcsf and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract spatial maps and time courses from a checkpoint.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// regression or jacobian.
        #[arg(long)]
        maps: Option<String>,
    },
    /// Thresholded, cluster-ordered FNC from extracted components.
    Fnc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        components: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Keep this many highest-variance components (0 = all).
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Fit the InfoMax ICA baseline.
    Infomax {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Ground truth for an MCC report.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Match model components against InfoMax (or another checkpoint).
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Compare against this checkpoint instead of InfoMax.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of random tiny models.
        #[arg(long, default_value_t = 1)]
        cases: u64,
    },
    /// Print the effective configuration.
    DumpConfig {
        #[command(flatten)]
        common: Common,
    },
}

/// Loads the config file and `--set` overrides on top of the defaults.
pub fn load_config(common: &Common) -> tcsep::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

/// Seed precedence: flag, then config, then $TCSEP_SEED, then default.
pub fn resolve_seed(common: &Common, cfg: &RunConfig, key: &str, default: u64) -> tcsep::Result<u64> {
    if let Some(s) = common.seed {
        return Ok(s);
    }
    if cfg.explicit.contains(key) {
        return Ok(cfg.get(key)?.parse().expect("validated on set"));
    }
    match std::env::var("TCSEP_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Error::Argument(format!("TCSEP_SEED is not an integer: `{v}`"))),
        Err(_) => Ok(default),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) => 1,
        Error::Format(_) | Error::Consistency(_) | Error::Data(_) | Error::Io(_) | Error::Csv(_) => 2,
        Error::Numerical(_) | Error::Training { .. } => 3,
    }
}

fn run(cmd: Command) -> tcsep::Result<()> {
    use pipeline::*;
    match cmd {
        Command::Synth { common, out, truth, subjects, kind, k_true, features, n_subjects, timepoints, noise } => {
            let mut cfg = load_config(&common)?;
            cfg.synth.seed = resolve_seed(&common, &cfg, "synth.seed", cfg.synth.seed)?;
            if let Some(k) = kind {
                cfg.set("synth.kind", &k)?;
            }
            let s = &mut cfg.synth;
            s.k_true = k_true.unwrap_or(s.k_true);
            s.feature_dim = features.unwrap_or(s.feature_dim);
            s.n_subjects = n_subjects.unwrap_or(s.n_subjects);
            s.timepoints = timepoints.unwrap_or(s.timepoints);
            s.noise_std = noise.unwrap_or(s.noise_std);
            let subjects = subjects.unwrap_or_else(|| subjects_path_for(&out));
            run_synth(&cfg, &out, &subjects, &truth)
        }
        Command::Train { common, data, subjects, out_dir, epochs, resume } => {
            let mut cfg = load_config(&common)?;
            cfg.train.seed = resolve_seed(&common, &cfg, "train.seed", cfg.train.seed)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let subjects = subjects.unwrap_or_else(|| subjects_path_for(&data));
            run_train(&cfg, &data, &subjects, &out_dir, resume.as_deref())
        }
        Command::Extract { common, checkpoint, data, subjects, out_dir, maps } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = maps {
                cfg.set("analysis.maps", &m)?;
            }
            let subjects = subjects.unwrap_or_else(|| subjects_path_for(&data));
            run_extract(&cfg, &checkpoint, &data, &subjects, &out_dir)
        }
        Command::Fnc { common, components, threshold, top, out_dir } => {
            let mut cfg = load_config(&common)?;
            cfg.analysis.fnc_threshold = threshold.unwrap_or(cfg.analysis.fnc_threshold);
            cfg.analysis.fnc_components = top.unwrap_or(cfg.analysis.fnc_components);
            run_fnc(&cfg, &components, &out_dir)
        }
        Command::Infomax { common, data, subjects, k, truth, out_dir } => {
            let mut cfg = load_config(&common)?;
            cfg.ica_components = k.unwrap_or(cfg.ica_components);
            let subjects = subjects.unwrap_or_else(|| subjects_path_for(&data));
            run_infomax(&cfg, &data, &subjects, truth.as_deref(), &out_dir)
        }
        Command::Compare { common, checkpoint, data, subjects, truth, reference, out_dir } => {
            let cfg = load_config(&common)?;
            let subjects = subjects.unwrap_or_else(|| subjects_path_for(&data));
            run_compare(&cfg, &checkpoint, &data, &subjects, truth.as_deref(), reference.as_deref(), &out_dir)
        }
        Command::Gradcheck { common, cases } => {
            let cfg = load_config(&common)?;
            let seed = resolve_seed(&common, &cfg, "train.seed", 1)?;
            run_gradcheck(seed, cases)
        }
        Command::DumpConfig { common } => {
            let mut cfg = load_config(&common)?;
            cfg.synth.seed = resolve_seed(&common, &cfg, "synth.seed", cfg.synth.seed)?;
            cfg.train.seed = resolve_seed(&common, &cfg, "train.seed", cfg.train.seed)?;
            print!("{}", cfg.dump());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
