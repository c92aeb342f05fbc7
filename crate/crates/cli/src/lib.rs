//! Command-line driver: configuration, the `pretrain`, `episodes`, `bench`
//! and `report` subcommands, and their manifests.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fewshot_core::metrics::SortKey;
use fewshot_core::trainer::Variant;

use commands::{BenchOptions, ReportOptions};
use config::ExperimentConfig;
pub use error::{CliError, EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Few-shot fine-tuning benchmarks with worst-case metrics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Plain,
    Ac,
    AcSr,
    AcEnsr,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Plain => Variant::Plain,
            VariantArg::Ac => Variant::Ac,
            VariantArg::AcSr => Variant::AcSr,
            VariantArg::AcEnsr => Variant::AcEnsr,
        }
    }
}

/// Flags shared by every experiment subcommand; each overrides a config key.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (`seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fine-tuning variant (`variant`).
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Output directory (`out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset file used as the unlabeled SR pool (`sr.pool`).
    #[arg(long)]
    pub sr_pool: Option<PathBuf>,
    /// Shots per class (`episodes.k_shot`).
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["1", "5"]))]
    pub k: Option<String>,
    /// Any other key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v.into();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.to_string_lossy().into_owned();
        }
        if let Some(p) = &self.sr_pool {
            cfg.sr_pool = p.to_string_lossy().into_owned();
        }
        if let Some(k) = &self.k {
            cfg.set("episodes.k_shot", k)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum SortArg {
    /// Worst episode first: ACC_1 descending.
    #[default]
    Acc1,
    /// Mean accuracy descending.
    Mean,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the backbone on the base split and write a checkpoint.
    Pretrain(ConfigArgs),
    /// Pre-sample the episode file every variant is evaluated on.
    Episodes {
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write the episode file.
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Fine-tune and evaluate one variant over the episode file.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Episode file to evaluate on.
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run even if the episode file is not the expected one.
        #[arg(long)]
        allow_episode_mismatch: bool,
    },
    /// Aggregate results files into metrics, a comparison table and histograms.
    Report {
        /// Results files (.csv or .json) or directories holding them.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        sort: SortArg,
        /// Pool all runs into one sample instead of averaging per-run metrics.
        #[arg(long)]
        pooled: bool,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Compare results from different episode files.
        #[arg(long)]
        allow_mixed_episodes: bool,
    },
    /// Print every config key with its default and description.
    Defaults,
}

/// Runs one parsed command, writing progress to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::data(format!("cannot write output: {e}"));
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.resolve()?;
            let r = commands::cmd_pretrain(&cfg)?;
            writeln!(out, "checkpoint {} sha256 {}", r.checkpoint.display(), r.sha256).map_err(io)?;
            writeln!(
                out,
                "base accuracy {:.4}, final loss {:.4}",
                r.base_accuracy, r.final_loss
            )
            .map_err(io)?;
        }
        Command::Episodes { config, episodes } => {
            let cfg = config.resolve()?;
            let r = commands::cmd_episodes(&cfg, episodes.as_deref())?;
            writeln!(out, "{} episodes -> {}", r.count, r.path.display()).map_err(io)?;
            writeln!(out, "sha256 {}", r.sha256).map_err(io)?;
        }
        Command::Bench {
            config,
            episodes,
            checkpoint,
            allow_episode_mismatch,
        } => {
            let cfg = config.resolve()?;
            let opts = BenchOptions {
                checkpoint,
                episodes,
                allow_episode_mismatch,
            };
            let r = commands::cmd_bench(&cfg, &opts)?;
            for note in &r.notes {
                writeln!(out, "note: {note}").map_err(io)?;
            }
            writeln!(out, "episode file sha256 {}", r.episode_hash).map_err(io)?;
            for (csv, _) in &r.files {
                writeln!(out, "wrote {}", csv.display()).map_err(io)?;
            }
        }
        Command::Report {
            results,
            out: dir,
            sort,
            pooled,
            bins,
            allow_mixed_episodes,
        } => {
            let opts = ReportOptions {
                out: dir,
                sort: match sort {
                    SortArg::Acc1 => SortKey::WorstCase,
                    SortArg::Mean => SortKey::Mean,
                },
                pooled,
                bins,
                allow_mixed_episodes,
            };
            let r = commands::cmd_report(&results, &opts)?;
            for note in &r.notes {
                writeln!(out, "note: {note}").map_err(io)?;
            }
            write!(out, "{}", r.table).map_err(io)?;
        }
        Command::Defaults => write!(out, "{}", ExperimentConfig::documented_defaults()).map_err(io)?,
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version arrive here too, on stdout with status 0
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}
