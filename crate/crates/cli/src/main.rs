use std::path::PathBuf;
use std::process::ExitCode;

use anomaly_ddpm::anomaly::{GridMode, Variant};
use anomaly_ddpm_cli::commands::{self, Context};
use anomaly_ddpm_cli::config::{Overrides, RunConfig};
use anomaly_ddpm_cli::{select_device, CliResult};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "anomaly-ddpm", version, about = "Latent-diffusion anomaly detection and segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Detection variant.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// VQ-VAE downsampling factor.
    #[arg(long = "f", global = true)]
    downsample: Option<usize>,
    /// Use the reduced KL grid and DDIM healing.
    #[arg(long, global = true)]
    fast: bool,
    /// Score images over every step of the chain.
    #[arg(long, global = true)]
    full_chain: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads used to read images.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Full,
    Fast,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic head phantoms to use as a healthy corpus.
    Phantoms {
        /// Target directory (default: paths.data_root).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Split the corpus and write the corrupted test set.
    Prepare,
    /// Train or resume the VQ-VAE.
    TrainVqvae,
    /// Train or resume the latent diffusion model.
    TrainDdpm,
    /// Fit per-location KL thresholds on the validation split.
    Calibrate {
        /// Grid to calibrate (default: the one the configured variant uses).
        #[arg(long, value_enum)]
        grid: Option<GridArg>,
    },
    /// Score images and write healed images, score maps and masks.
    Detect {
        /// Directory of PNGs to score (default: the test split).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Report Dice, AUPRC and AUROC on the test split.
    Evaluate {
        /// Variants to evaluate (default: the configured one).
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Vec<Variant>,
    },
    /// Time detection on the test split.
    Bench {
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Vec<Variant>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    let overrides = Overrides {
        variant: g.variant,
        downsample: g.downsample,
        fast: g.fast,
        full_chain: g.full_chain,
        seed: g.seed,
        workers: g.workers,
    };
    let config = RunConfig::load(g.config.as_deref(), &overrides)?;
    let device = select_device()?;
    eprintln!("# resolved configuration (sha256 {})", config.hash());
    eprint!("{}", config.to_toml());

    if let Command::Phantoms { out, n, size } = &cli.command {
        let dir = out.clone().unwrap_or_else(|| config.paths.data_root.clone());
        return commands::phantoms(&dir, *n, *size, config.seed);
    }
    let ctx = Context::new(config, device)?;
    let or_configured = |v: &Vec<Variant>| {
        if v.is_empty() {
            vec![ctx.config.anomaly.variant]
        } else {
            v.clone()
        }
    };
    match &cli.command {
        Command::Phantoms { .. } => unreachable!("handled above"),
        Command::Prepare => commands::prepare(&ctx),
        Command::TrainVqvae => commands::train_vqvae(&ctx),
        Command::TrainDdpm => commands::train_ddpm(&ctx),
        Command::Calibrate { grid } => {
            let grids = match grid {
                Some(GridArg::Full) => vec![GridMode::Full],
                Some(GridArg::Fast) => vec![GridMode::Fast],
                Some(GridArg::Both) => vec![GridMode::Full, GridMode::Fast],
                None => vec![ctx.config.detect_config().grid()],
            };
            commands::calibrate(&ctx, &grids)
        }
        Command::Detect { input } => commands::detect(&ctx, input.as_deref()),
        Command::Evaluate { variants } => commands::evaluate(&ctx, &or_configured(variants)).map(|_| ()),
        Command::Bench { variants } => commands::run_bench(&ctx, &or_configured(variants)).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
