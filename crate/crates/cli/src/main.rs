use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pemma_cli::config::parse_modes;
use pemma_cli::{execute, Method, Overrides, Scope, Stage};

/// Parameter-efficient multi-modal adaptation experiments.
#[derive(Parser, Debug)]
#[command(name = "pemma", version)]
struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    stage: Stage,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Comma-separated inference modes, e.g. `ct,pet,ctpet`.
    #[arg(long)]
    modes: Option<String>,
    /// Continual fine-tuning scope.
    #[arg(long, value_enum)]
    scope: Option<Scope>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let modes = match cli.modes.as_deref().map(parse_modes).transpose() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("pemma: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        method: cli.method,
        modes,
        scope: cli.scope,
    };
    match execute(cli.stage, &cli.config, &overrides) {
        Ok(rec) => {
            println!("{} finished in {:.1} s -> {}", rec.stage, rec.wall_clock_s, rec.run);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("pemma: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
