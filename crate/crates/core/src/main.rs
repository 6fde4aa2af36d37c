use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use betaspec::harness::{Run, RunConfig, EXIT_FAILURE, EXIT_PREREQUISITE};
use betaspec::Error;

/// Multi-β VAE and non-linear latent diffusion experiments.
#[derive(Debug, Parser)]
#[command(name = "betaspec", version)]
struct Cli {
    /// TOML run config. Defaults to `<run-dir>/config.toml` when present,
    /// else the built-in desk-scale config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the sprite dataset and its train/eval split.
    GenData,
    /// Train the multi-β VAE and its σ schedule.
    TrainVae,
    /// Train the two-head denoiser on cached VAE encodings.
    TrainDiff,
    /// Generate images by ancestral sampling.
    Sample {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the latent trajectory of the first chain.
        #[arg(long)]
        trace: bool,
    },
    /// Noise eval images at one grid β and denoise them back to β = 0.
    Denoise {
        #[arg(long)]
        beta_index: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Metrics at one grid β.
    Evaluate {
        #[arg(long)]
        beta_index: usize,
    },
    /// Metrics at every `stride`-th grid β plus a summary CSV.
    SweepBeta {
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Move an image along a principal latent direction.
    Manipulate {
        #[arg(long)]
        image: usize,
        #[arg(long, default_value_t = 0)]
        direction: usize,
        #[arg(long)]
        beta_index: usize,
        /// Offsets in units of the latent standard deviation along the direction.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-3,-1.5,0,1.5,3")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use seed + k for the k-th edit instead of one shared seed.
        #[arg(long)]
        vary_seed: bool,
    },
    /// Slerp selected latent coordinates between two images.
    Interpolate {
        #[arg(long)]
        image1: usize,
        #[arg(long)]
        image2: usize,
        /// Latent coordinates to interpolate (default: all).
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        beta_index: usize,
        #[arg(long, default_value_t = 5)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate metric reports into report.json.
    Report,
}

fn resolve_config(cli: &Cli) -> betaspec::Result<RunConfig> {
    let from_dir = cli.run_dir.as_ref().map(|d| d.join("config.toml")).filter(|p| p.exists());
    let mut config = match cli.config.clone().or(from_dir) {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.run_dir {
        config.out_dir = dir.clone();
    }
    Ok(config)
}

fn dispatch(cli: &Cli) -> betaspec::Result<String> {
    let mut run = Run::open(resolve_config(cli)?)?;
    match &cli.command {
        Command::GenData => run.gen_data(),
        Command::TrainVae => run.train_vae(),
        Command::TrainDiff => run.train_diff(),
        Command::Sample { n, seed, trace } => run.sample(*n, *seed, *trace),
        Command::Denoise { beta_index, n, seed } => run.denoise(*beta_index, *n, *seed),
        Command::Evaluate { beta_index } => run.evaluate(*beta_index),
        Command::SweepBeta { stride } => run.sweep_beta(*stride),
        Command::Manipulate {
            image,
            direction,
            beta_index,
            alphas,
            seed,
            vary_seed,
        } => run.manipulate(*image, *direction, *beta_index, alphas, *seed, *vary_seed),
        Command::Interpolate {
            image1,
            image2,
            dims,
            beta_index,
            points,
            seed,
        } => {
            let all: Vec<usize> = (0..run.config.vae.latent_dim).collect();
            run.interpolate(*image1, *image2, dims.as_deref().unwrap_or(&all), *beta_index, *points, *seed)
        }
        Command::Report => run.report(),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::MissingPrerequisite(_) => "missing-prerequisite",
        Error::Locked(_) => "locked",
        Error::ConfigMismatch { .. } => "config-mismatch",
        Error::Io { .. } => "io",
        Error::Parse(_) => "parse",
        Error::Diverged { .. } => "diverged",
        _ => "invalid",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: usage: {}", msg.lines().next().unwrap_or("").trim_start_matches("error: "));
            return ExitCode::from(EXIT_FAILURE as u8);
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {}", error_kind(&e), e.to_string().replace('\n', " "));
            let code = if matches!(e, Error::MissingPrerequisite(_)) {
                EXIT_PREREQUISITE
            } else {
                EXIT_FAILURE
            };
            ExitCode::from(code as u8)
        }
    }
}
