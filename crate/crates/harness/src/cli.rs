use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evifed_federation::Variant;

#[derive(Debug, Parser)]
#[command(name = "evifed", version, about = "Federated evidential prompt tuning on synthetic departments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; must set `T`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed_data: Option<u64>,
    #[arg(long, global = true)]
    pub seed_init: Option<u64>,
    #[arg(long, global = true)]
    pub seed_shuffle: Option<u64>,
    #[arg(long, global = true, env = "EVIFED_OUT_DIR", default_value = "evifed-out")]
    pub out_dir: PathBuf,
    /// Disable dropout.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Also write timing.json with wall-clock times and peak memory.
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// One federated run: rounds.csv, run.json, checkpoint and manifest.
    Run {
        #[arg(long, value_enum, default_value_t = VariantArg::Dluc)]
        variant: VariantArg,
    },
    /// Full method against pooled, isolated and equal-weight variants.
    Ablate {
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// One run per aggregation rate.
    SweepMu {
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Many clients for a few rounds; reports time, memory and state size.
    Stress {
        #[arg(long, default_value_t = 100)]
        clients: usize,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
    },
    /// Recomputes the cross-evaluation matrix of a finished run.
    CrossEval { run_dir: PathBuf },
    /// Writes plot-ready CSV files from a finished run.
    ExportPlots { run_dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Dluc,
    Uniform,
    Isolated,
    Pooled,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Dluc => Variant::Dluc,
            VariantArg::Uniform => Variant::Uniform,
            VariantArg::Isolated => Variant::Isolated,
            VariantArg::Pooled => Variant::Pooled,
        }
    }
}
