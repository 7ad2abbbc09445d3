use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use stormtail::commands;
use stormtail::config::Config;
use stormtail::error::CliResult;
use stormtail::Ctx;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Datagen,
    Train,
    Eval,
    Calibrate,
    Attribute,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "stormtail", version, about = "Long-tail heavy-rain post-processing pipeline")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed (datagen) or seed list (other commands).
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment variant; defaults to dpsformer.
    #[arg(long)]
    variant: Option<String>,
    /// Bit-reproducible outputs: no wall-clock values are recorded.
    #[arg(long)]
    deterministic: bool,
}

fn run(args: Args) -> CliResult<()> {
    let cfg = Config::load(&args.config)?;
    let ctx = Ctx::new(cfg, args.out, args.seed, args.variant, args.deterministic);
    match args.command {
        Command::Datagen => commands::datagen(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Calibrate => commands::calibrate(&ctx),
        Command::Attribute => commands::attribute(&ctx),
        Command::Report => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
