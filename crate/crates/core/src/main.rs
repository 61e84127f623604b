use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use ladd::cli::{execute, Command, RunConfig};
use ladd::LaddError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Latent adversarial diffusion distillation on toy data.
#[derive(Debug, Parser)]
#[command(name = "ladd", version)]
struct Args {
    command: Command,
    /// TOML run configuration.
    config: PathBuf,
    /// `key=value` overrides, as `section.key` or a bare key unique to one section.
    overrides: Vec<String>,
    /// Student steps for `sample`: 1, 2 or 4.
    #[arg(long)]
    steps: Option<usize>,
}

fn run(args: &Args) -> anyhow::Result<PathBuf> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let dir = execute(args.command, &cfg, args.steps).with_context(|| args.command.name().to_string())?;
    Ok(dir)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(&args) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let config = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<LaddError>(), Some(LaddError::Config(_))));
            let reason = format!("{e:#}").replace('\n', " ");
            eprintln!("ladd: {reason}");
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
