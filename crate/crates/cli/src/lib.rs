//! Subcommands wiring the prospectivity pipeline: synthetic worlds,
//! preprocessing, masked-image pretraining, likely-negative sampling,
//! classifier training, mapping, attribution, evaluation and ablations.
//!
//! Every subcommand writes into its own run directory
//! `<out>/<timestamp>-<name>/` holding the echoed config, input hashes,
//! a log and its outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod render;
pub mod rundir;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "prospectr", version, about = "Self-supervised prospectivity mapping pipeline")]
pub struct Cli {
    /// Run config (JSON). Defaults are used for anything not given.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for single runs; for looping subcommands it replaces the seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Run name (defaults to the subcommand).
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Worker threads.
    #[arg(long, global = true, env = "PROSPECTR_THREADS")]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    /// Overrides `pu.filter_range`.
    #[arg(long, global = true)]
    pub filter_range: Option<f64>,
    /// Overrides `eval.drop_fraction`.
    #[arg(long, global = true)]
    pub drop_fraction: Option<f64>,
    /// Overrides `clf.mc_passes`.
    #[arg(long, global = true)]
    pub mc_passes: Option<usize>,
    /// Overrides `xai.steps`.
    #[arg(long, global = true)]
    pub ig_steps: Option<usize>,
    /// Overrides `clf.threshold`.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureKind {
    Encoder,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Vit,
    Mlp,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world (layers, truth, deposits, labels).
    Synth,
    /// Clean and standardize a raster.
    Preprocess {
        #[arg(long)]
        raster: PathBuf,
    },
    /// Masked-image pretraining of the encoder (labels are never read).
    Pretrain {
        #[arg(long)]
        raster: PathBuf,
    },
    /// Rank unknowns by similarity to the deposits and draw likely negatives.
    SampleNegatives {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        deposits: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Train a classifier on a label raster.
    Train {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Pretrained encoder; its features are frozen.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Train the same architecture end to end from scratch.
        #[arg(long)]
        no_pretrain: bool,
        #[arg(long, value_enum, default_value = "encoder")]
        features: FeatureKind,
        #[arg(long, value_enum, default_value = "vit")]
        arch: Arch,
    },
    /// Prospectivity mean and uncertainty maps.
    Predict {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Integrated-gradients attributions.
    Explain {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Pixel `row,col` to explain (repeatable).
        #[arg(long = "pixel")]
        pixels: Vec<String>,
        /// Explain the Present pixels of this label raster.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Explain every `xai.stride`-th pixel.
        #[arg(long)]
        grid: bool,
    },
    /// Train and test every configured method over the seed list.
    Evaluate {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        deposits: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Test with a fraction of the layers dropped per sample.
    AblateSparsity {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        deposits: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Repeat training over the configured likely-negative filter ranges.
    AblateFilterRange {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        deposits: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Tables from evaluation report files.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Pretrain { .. } => "pretrain",
            Command::SampleNegatives { .. } => "sample-negatives",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Explain { .. } => "explain",
            Command::Evaluate { .. } => "evaluate",
            Command::AblateSparsity { .. } => "ablate-sparsity",
            Command::AblateFilterRange { .. } => "ablate-filter-range",
            Command::Report { .. } => "report",
        }
    }

    fn loops_seeds(&self) -> bool {
        matches!(
            self,
            Command::Evaluate { .. } | Command::AblateSparsity { .. } | Command::AblateFilterRange { .. }
        )
    }
}

/// The materialized config: file (or defaults) plus flag overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(f) = cli.filter_range {
        cfg.pu.filter_range = f;
    }
    if let Some(f) = cli.drop_fraction {
        cfg.eval.drop_fraction = f;
    }
    if let Some(t) = cli.mc_passes {
        cfg.clf.mc_passes = t;
    }
    if let Some(s) = cli.ig_steps {
        cfg.xai.steps = s;
    }
    if let Some(t) = cli.threshold {
        cfg.clf.threshold = t;
    }
    if let Some(s) = cli.seed {
        if cli.command.loops_seeds() {
            cfg.seeds = vec![s];
        }
        if matches!(cli.command, Command::Synth) {
            cfg.synth.seed = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed invocation and returns its run directory.
pub fn run(cli: &Cli) -> CliResult<PathBuf> {
    rundir::init_logging(cli.quiet);
    let cfg = resolve_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // Only the first pool of a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = commands::Ctx {
        seed: cli.seed.unwrap_or(cfg.seeds[0]),
        cfg,
        out: cli.out.clone(),
        name: cli.name.clone().unwrap_or_else(|| cli.command.name().to_string()),
    };
    let result = commands::dispatch(&ctx, &cli.command);
    rundir::detach_log();
    result
}

/// Parses `args` (program name first) and runs them.
pub fn run_args<I, S>(args: I) -> CliResult<PathBuf>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(&cli)
}
