mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use commands::Usage;

#[derive(Debug, Parser)]
#[command(name = "segbench", version, about = "Segmentation-derived VLM benchmark pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Worker threads for generation (defaults to available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check configured datasets against the input invariants.
    Validate,
    /// Compute object metadata and write it as JSON lines.
    Enrich,
    /// Human annotation job round-trip.
    Jobs {
        #[command(subcommand)]
        action: JobsCommand,
    },
    /// Build the task bundle.
    Generate,
    /// Run the bundle against the configured endpoints.
    Evaluate,
    /// Score evaluation records.
    Score,
    /// Consolidated tables and plot data.
    Report,
    /// Write a synthetic fixture and a matching config.
    Synth {
        #[arg(long)]
        images: Option<usize>,
    },
    /// Serve the mock endpoint for the current bundle.
    MockServe {
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: std::net::SocketAddr,
    },
}

#[derive(Debug, Subcommand)]
enum JobsCommand {
    /// Write an annotation job for the configured datasets.
    Export {
        #[arg(long, default_value = "job")]
        job_id: String,
        /// Comma-separated subset of occluded,truncated,direction.
        #[arg(long, value_delimiter = ',', default_value = "occluded,truncated,direction")]
        attributes: Vec<String>,
    },
    /// Check a returned ratings file and keep the valid items.
    Import {
        #[arg(long)]
        file: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = commands::Context::new(cli.config.as_deref(), cli.seed, cli.out_dir, cli.workers)?;
    match cli.command {
        Command::Validate => commands::validate(&ctx),
        Command::Enrich => commands::enrich(&ctx),
        Command::Jobs { action: JobsCommand::Export { job_id, attributes } } => commands::jobs_export(&ctx, &job_id, &attributes),
        Command::Jobs { action: JobsCommand::Import { file } } => commands::jobs_import(&ctx, &file),
        Command::Generate => commands::generate(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Score => commands::score(&ctx),
        Command::Report => commands::report(&ctx),
        Command::Synth { images } => commands::synth(&ctx, images),
        Command::MockServe { addr } => commands::mock_serve(&ctx, addr),
    }
}
