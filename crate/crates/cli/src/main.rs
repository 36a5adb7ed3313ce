//! `featseg` command-line driver.
//!
//! Every subcommand prints a JSON summary on stdout and diagnostics on
//! stderr. Exit codes: 0 success, 1 validation error (including bad flags),
//! 2 I/O error.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featseg::{Error, ErrorKind};

pub const THREADS_ENV: &str = "FEATSEG_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "featseg",
    version,
    about = "Unsupervised segmentation from generator feature clusters"
)]
pub struct Cli {
    /// Worker threads (overrides FEATSEG_THREADS; default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural toy dataset with ground truth.
    Toygen(ToygenArgs),
    /// Fit k-means centroids on a manifest's feature maps.
    Cluster(ClusterArgs),
    /// Write cluster masks for every sample of a manifest.
    Synth(SynthArgs),
    /// Fit a linear attribute direction from labeled latents.
    FitDirection(FitDirectionArgs),
    /// Move a latent along a fitted direction.
    Manipulate(ManipulateArgs),
    /// Train the segmentation network on (image, mask) pairs.
    Distill(DistillArgs),
    /// Predict masks with a trained network.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct ToygenArgs {
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Index of the first sample (use to draw held-out samples).
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_size: usize,
    #[arg(long, default_value_t = 24)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub regions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    /// Label the planted attribute as its own class.
    #[arg(long)]
    pub attr_class: bool,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=255))]
    pub k: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Centroid tensor path; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub l2_normalize: bool,
    /// Minibatch size (default: full batch below 2^22 points).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub minibatch: Option<u64>,
    /// Independent k-means++ starts; the lowest inertia wins.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub restarts: u64,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub rel_tol: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    #[arg(long)]
    pub model: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub classmap: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitDirectionArgs {
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub l2_penalty: f64,
    #[arg(long, default_value_t = 5000, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ManipulateArgs {
    #[arg(long)]
    pub latent: std::path::PathBuf,
    #[arg(long)]
    pub direction: std::path::PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..=255))]
    pub classes: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["image", "manifest"])))]
pub struct PredictArgs {
    #[arg(long)]
    pub params: std::path::PathBuf,
    /// Single RGB PNG; `--out` is the mask path.
    #[arg(long)]
    pub image: Option<std::path::PathBuf>,
    /// Every image of a manifest; `--out` is a directory.
    #[arg(long)]
    pub manifest: Option<std::path::PathBuf>,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MatchArg {
    #[value(name = "one_to_one")]
    OneToOne,
    #[value(name = "majority")]
    Majority,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_manifest: std::path::PathBuf,
    #[arg(long)]
    pub gt_manifest: std::path::PathBuf,
    #[arg(long = "match", value_enum, default_value_t = MatchArg::OneToOne)]
    pub match_mode: MatchArg,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

fn thread_count(flag: Option<u16>) -> featseg::Result<Option<usize>> {
    if let Some(t) = flag {
        return Ok(Some(t as usize));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::invalid(
                THREADS_ENV,
                format!("{v:?} is not a positive integer"),
            )),
        },
        Err(_) => Ok(None),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 1,
        ErrorKind::Io => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = thread_count(cli.threads).and_then(|threads| {
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::invalid("threads", e.to_string()))?;
        }
        commands::run(cli.command)
    });
    match result {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
