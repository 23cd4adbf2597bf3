mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_INTERRUPTED: u8 = 130;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn divergence(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DIVERGENCE,
            message: message.into(),
        }
    }

    pub fn interrupted(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERRUPTED,
            message: message.into(),
        }
    }
}

fn parse() -> Result<Cli, ExitCode> {
    let cmd = Cli::command();
    let argv = match config::merge(std::env::args_os().collect(), &cmd) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: config: {e}");
            return Err(ExitCode::from(EXIT_USAGE));
        }
    };
    cmd.try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m))
        .map_err(|e| {
            let _ = e.print();
            ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 })
        })
}

async fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Recaption(a) => commands::recaption(a).await,
        Command::Sample(a) => commands::sample(a, cli.seed),
        Command::TrainToy(a) => commands::train_toy_cmd(a, cli.seed),
        Command::Eval(a) => commands::eval(a),
        Command::Stats(a) => commands::stats(a),
        Command::MockServe(a) => commands::mock_serve(a).await,
    }
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .parse_env("VECAP_LOG")
        .target(env_logger::Target::Stderr)
        .init();
    let runtime = match tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: starting runtime: {e}");
            return ExitCode::from(EXIT_IO);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
