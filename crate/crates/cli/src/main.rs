use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pgm_cli::commands::{self, AblateArgs, CaptureArgs};
use pgm_cli::config::PipelineConfig;
use pgm_cli::error::CliResult;
use pgm_core::guidance::InitMode;

#[derive(Parser)]
#[command(
    name = "pgm",
    version,
    about = "Physics-guided motion capture from synthetic monocular observations"
)]
struct Cli {
    /// Pipeline config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Latent,
    Standard,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the observation-to-motion VAE.
    TrainVae {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser against a frozen VAE.
    TrainDiffusion {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long, value_enum)]
        init: Option<Init>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct one sequence; writes the motion and a diagnostics file.
    Capture {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// Dataset file holding the observations.
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Arm name such as guided-s3-T5; the config's guidance section otherwise.
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted motion file with a ground-truth one.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate ablation arms on the test split; writes JSON and CSV.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        latent: Option<PathBuf>,
        #[arg(long)]
        standard: Option<PathBuf>,
        /// Repeatable; every named arm when omitted.
        #[arg(long = "arm")]
        arms: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load(&cli)?;
    match &cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, out).map(|_| ()),
        Command::TrainVae { dataset, out } => {
            commands::train_vae_cmd(&cfg, dataset.as_deref(), out)
        }
        Command::TrainDiffusion {
            dataset,
            vae,
            init,
            out,
        } => {
            let init = init.map(|i| match i {
                Init::Latent => InitMode::Latent,
                Init::Standard => InitMode::Standard,
            });
            commands::train_diffusion_cmd(&cfg, dataset.as_deref(), vae.as_deref(), init, out)
        }
        Command::Capture {
            vae,
            denoiser,
            observations,
            sequence,
            arm,
            out,
        } => commands::capture_cmd(
            &cfg,
            &CaptureArgs {
                vae: vae.as_deref(),
                denoiser: denoiser.as_deref(),
                observations: observations.as_deref(),
                sequence: *sequence,
                arm: arm.as_deref(),
                out,
            },
        )
        .map(|_| ()),
        Command::Eval { pred, gt, out } => {
            commands::eval_cmd(cli.config.is_some().then_some(&cfg), pred, gt, out).map(|_| ())
        }
        Command::Ablate {
            dataset,
            vae,
            latent,
            standard,
            arms,
            out,
        } => commands::ablate_cmd(
            &cfg,
            &AblateArgs {
                dataset: dataset.as_deref(),
                vae: vae.as_deref(),
                latent: latent.as_deref(),
                standard: standard.as_deref(),
                arms,
                out,
            },
        )
        .map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PGM_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
