//! `affseg`: train and dissect weakly supervised affordance segmenters.
//!
//! Every subcommand is deterministic given its config file. The command line
//! carries only paths, the thread cap, and verbosity; all result-affecting
//! knobs live in the JSON config (see `RunConfig`).

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "affseg", version, about = "Weakly supervised affordance segmentation runner")]
struct Cli {
    /// Cap on rayon worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log more (-v: info, -vv: debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/ and test/ halves.
    SynthGen {
        #[command(flatten)]
        config: ConfigArg,
        /// Use the pinned benchmark generator settings.
        #[arg(long)]
        benchmark: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stamp keypoint seed disks without training.
    Init {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Override the config's disk radius fraction.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full EM pipeline and write all checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select the seed-disk radius from keypoints alone.
    SigmaSweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated radius fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.03, 0.06, 0.12])]
        grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model against a manifest with ground truth.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the threshold/aggregator/keypoint ablation matrix.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Score models here instead of on the training manifest.
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        /// Comma-separated keypoint budgets per class.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5])]
        keypoint_counts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }

    match &cli.command {
        Command::SynthGen { config, benchmark, out } => {
            let mut cfg = config::load_config(config.config.as_deref())?;
            if *benchmark {
                cfg.synth = affseg::synth::benchmark_config();
                cfg.seed = cfg.synth.seed;
                cfg.train_count = affseg::synth::BENCHMARK_TRAIN;
                cfg.test_count = affseg::synth::BENCHMARK_TEST;
                cfg.propagate_seed();
            }
            commands::cmd_synth_gen(&cfg, out)
        }
        Command::Init { config, manifest, sigma, out } => {
            let mut cfg = config::load_config(config.config.as_deref())?;
            if let Some(s) = sigma {
                cfg.em.init.sigma_fraction = *s;
            }
            commands::cmd_init(&cfg, manifest, out)
        }
        Command::Train { config, manifest, out } => {
            let cfg = config::load_config(config.config.as_deref())?;
            commands::cmd_train(&cfg, manifest, out)
        }
        Command::SigmaSweep { config, manifest, grid, out } => {
            let cfg = config::load_config(config.config.as_deref())?;
            commands::cmd_sigma_sweep(&cfg, manifest, grid, out)
        }
        Command::Eval { config, manifest, model, out } => {
            let cfg = config::load_config(config.config.as_deref())?;
            commands::cmd_eval(&cfg, manifest, model, out)
        }
        Command::Ablate { config, manifest, eval_manifest, keypoint_counts, out } => {
            let cfg = config::load_config(config.config.as_deref())?;
            commands::cmd_ablate(&cfg, manifest, eval_manifest.as_deref(), keypoint_counts, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("affseg: {err:#}");
            ExitCode::FAILURE
        }
    }
}
