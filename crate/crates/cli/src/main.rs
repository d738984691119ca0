mod args;
mod commands;
mod config;
mod error;

use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;
use commands::{Ctx, Output};
use config::ConfigFile;
use error::{CliError, CliResult};

fn write_artifacts(dir: &std::path::Path, out: &Output) -> CliResult<()> {
    let fail = |e: std::io::Error| CliError::Domain(e.into());
    std::fs::create_dir_all(dir).map_err(fail)?;
    for (name, bytes) in &out.artifacts {
        std::fs::write(dir.join(name), bytes).map_err(fail)?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> CliResult<Output> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let ctx = Ctx { seed: cli.seed, config };
    let out = reluplan::exec::with_workers(cli.workers, || commands::run(&ctx, &cli.command))?;
    if let Some(dir) = &cli.output_dir {
        write_artifacts(dir, &out)?;
    }
    Ok(out)
}

fn fail(err: &CliError, subcommand: Option<&str>) -> ExitCode {
    eprintln!("{}", err.record(subcommand));
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return fail(&CliError::usage(first), None);
        }
    };
    if cli.workers == Some(0) {
        return fail(&CliError::usage("--workers must be at least 1"), Some(cli.command.name()));
    }
    let name = cli.command.name();
    match execute(&cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            // a closed pipe downstream is not an error of ours
            let _ = stdout.write_all(out.stdout.as_bytes()).and_then(|_| stdout.flush());
            match &out.failure {
                Some(err) => fail(err, Some(name)),
                None => ExitCode::SUCCESS,
            }
        }
        Err(err) => fail(&err, Some(name)),
    }
}
