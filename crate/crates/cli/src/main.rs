use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dima_core::pipeline::{parse_override, run, Command, RunConfig};
use dima_core::{Error, Result};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    TrainDdpm,
    Simulate,
    TrainCorrector,
    Evaluate,
    Report,
    Phantom,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::TrainDdpm => Command::TrainDdpm,
            Cmd::Simulate => Command::Simulate,
            Cmd::TrainCorrector => Command::TrainCorrector,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Report => Command::Report,
            Cmd::Phantom => Command::Phantom,
        }
    }
}

/// Diffusion-based motion artifact simulation and correction pipeline.
#[derive(Debug, Parser)]
#[command(name = "dima", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,

    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Override a config field by dotted path, e.g. `schedule.timesteps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Global seed; replaces `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; replaces `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn execute(cli: &Cli) -> Result<()> {
    let overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = RunConfig::load(&cli.config, &overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    run(cli.command.into(), &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                log::error!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
