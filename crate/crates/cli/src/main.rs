use std::path::PathBuf;

use clap::{Parser, Subcommand};

use dvdp_cli::commands::{self, Ctx};
use dvdp_cli::config::CliConfig;
use dvdp_cli::failure::{CliResult, Failure};

#[derive(Parser)]
#[command(
    name = "dvdp",
    version,
    about = "Cascaded diffusion with scheduled dimension reduction: schedules, forward noising, training, sampling, and turning-point verification"
)]
struct Cli {
    /// Run configuration file (built-in defaults apply when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; `schedule` and `verify` print to stdout when omitted
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the active command's seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress messages on stderr
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dump the attenuation and noise tables as CSV
    Schedule,
    /// Run the forward process and write trajectory checkpoints
    Forward {
        /// Initial tensor; drawn from [data] when omitted
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate samples by the reverse process (tensor + PGM preview each)
    Sample {
        /// Trained parameters; the analytic denoiser from [data] is used when omitted
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the network denoiser; writes checkpoint.dvck and train_loss.csv
    Train,
    /// Estimate turning-point divergences against their analytic ceilings
    Verify,
}

/// DVDP_THREADS caps the worker pool; 0 or unset picks the core count.
fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("DVDP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Failure::config(format!(
            "DVDP_THREADS must be a non-negative integer, got '{raw}'"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::other(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let cfg = match &cli.config {
        Some(path) => CliConfig::from_path(path)?,
        None => CliConfig::default(),
    };
    let ctx = Ctx {
        cfg,
        out: cli.out,
        seed: cli.seed,
        quiet: cli.quiet,
    };
    match cli.command {
        Cmd::Schedule => commands::cmd_schedule(&ctx),
        Cmd::Forward { input } => commands::cmd_forward(&ctx, input.as_deref()),
        Cmd::Sample { checkpoint } => commands::cmd_sample(&ctx, checkpoint.as_deref()),
        Cmd::Train => commands::cmd_train(&ctx),
        Cmd::Verify => commands::cmd_verify(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(failure) = run(cli) {
        eprintln!("error: {failure}");
        std::process::exit(failure.exit_code());
    }
}
