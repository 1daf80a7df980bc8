//! `bnas` — the operator entry point. One TOML config drives every
//! subcommand; individual flags override individual keys, and the resolved
//! result is snapshotted next to the outputs so any run can be reproduced
//! from the snapshot alone.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime divergence, 4 I/O error.

mod commands;
mod config;
mod gradlog;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bnas", version, about = "Search, train and deploy binary (1-bit) conv nets")]
pub struct Cli {
    /// Run configuration (TOML). Flags below override single keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master RNG seed for search and train.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Final-network shape preset.
    #[arg(long, global = true, value_parser = ["bnas-mini", "bnas-a", "bnas-b", "bnas-c"])]
    pub preset: Option<String>,

    /// Zeroise discretization divisor; "inf" drops Zeroise entirely.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,

    /// Training scheme.
    #[arg(long, global = true, value_parser = ["standard", "minimal", "minimal-longer"])]
    pub scheme: Option<String>,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run architecture search; writes genotype.json and metrics.csv.
    Search,
    /// Train a genotype; writes checkpoint.ckpt, curve.csv and a gradient log.
    Train {
        /// Genotype file (default: <out>/genotype.json, then the config key).
        #[arg(long, value_name = "FILE")]
        genotype: Option<PathBuf>,
    },
    /// Score a trained run's checkpoint on the test set.
    Eval {
        /// Directory holding resolved.toml, genotype.json and checkpoint.ckpt.
        run_dir: PathBuf,
    },
    /// Cost report plus a packed-vs-float timing table for a trained run.
    Bench { run_dir: PathBuf },
    /// Write the deployed BNASBIN1 model for a trained run.
    Export { run_dir: PathBuf },
    /// Paired ablation experiment: baseline vs one toggled mechanism.
    Ablate {
        #[arg(value_parser = ["no_skip", "no_zeroise", "no_div", "no_dilconv", "with_sepconv"])]
        which: String,
    },
    /// Render metrics/curve CSVs and gradient logs as SVG figures.
    Plot {
        /// metrics.csv / curve.csv / grad_norms.bin files, one figure each.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &bnas_core::Error) -> u8 {
    use bnas_core::Error;
    match e {
        Error::Config(_) | Error::InvalidArg { .. } | Error::ShapeMismatch { .. } => 2,
        Error::Divergence(_) | Error::NonFinite { .. } => 3,
        Error::Io(_) | Error::Format { .. } => 4,
    }
}
