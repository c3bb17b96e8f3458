use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gaussct::io::Axis;
use gaussct_cli::commands::{self, Method, Sweep};
use gaussct_cli::{config, exit_code};

#[derive(Parser)]
#[command(name = "gaussct", version, about = "Sparse-view cone-beam CT with 3D Gaussians")]
struct Cli {
    /// Worker threads; falls back to GAUSSCT_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON experiment config; the built-in abdomen setup when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.iterations=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<config::ExperimentConfig> {
        config::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the phantom and write its projections and ground truth.
    Simulate(ConfigArgs),
    /// Reconstruct from the simulated projections.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Run an ablation sweep and write one CSV row per run.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        sweep: Sweep,
    },
    /// PSNR and SSIM between two volumes.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Also write the result as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write PGM slices of a volume.
    ExportSlices {
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "z")]
        axis: Axis,
    },
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("GAUSSCT_THREADS") {
            Ok(v) => Some(v.parse().context("GAUSSCT_THREADS must be a positive integer")?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Simulate(cfg) => {
            let out = commands::cmd_simulate(&cfg.load()?)?;
            println!("{}", out.projections.display());
        }
        Command::Reconstruct { cfg, method } => {
            commands::cmd_reconstruct(&cfg.load()?, method)?;
        }
        Command::Ablate { cfg, sweep } => {
            let cfg = cfg.load()?;
            let rows = commands::cmd_ablate(&cfg, sweep)?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Command::Metrics { a, b, out } => {
            commands::cmd_metrics(&a, &b, out.as_deref())?;
        }
        Command::ExportSlices { volume, out, axis } => {
            commands::cmd_export_slices(&volume, &out, axis)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
