mod args;
mod commands;
mod report;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{CommandFactory, FromArgMatches};
use serde::Serialize;

use args::{Cli, Command, RunConfig};

/// A failed run: exit status plus a message for the error JSON.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "input",
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "numerical",
            message: message.into(),
        }
    }
}

impl From<fragavg::Error> for Failure {
    fn from(e: fragavg::Error) -> Self {
        if e.is_input_error() {
            Failure::input(e.to_string())
        } else {
            Failure::numerical(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let out_given = matches.value_source("out") == Some(ValueSource::CommandLine);

    let config = match cli.command {
        Command::Rerun(r) => match load_config(&r.config) {
            Ok(mut c) => {
                if out_given {
                    c.global.out = cli.global.out;
                }
                c
            }
            Err(f) => return fail(None, f),
        },
        command => RunConfig {
            version: env!("CARGO_PKG_VERSION").to_string(),
            global: cli.global,
            command,
        },
    };
    let out = config.global.out.clone();
    match run(config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(Some(&out), f),
    }
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn run(mut config: RunConfig) -> CliResult<()> {
    commands::absolutize(&mut config)?;
    fs::create_dir_all(&config.global.out)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", config.global.out.display())))?;
    commands::write_json(&config.global.out.join("config.json"), &config)?;
    log::info!("running {} into {}", config.command.name(), config.global.out.display());
    match &config.command {
        Command::Fit(a) => commands::fit(&config.global, a),
        Command::Predict(a) => commands::predict(&config.global, a),
        Command::Compare(a) => commands::compare(&config.global, a),
        Command::Simulate(a) => commands::simulate(&config.global, a),
        Command::Screen(a) => commands::screen(&config.global, a),
        Command::Rerun(_) => Err(Failure::input("a config file cannot itself be a rerun")),
    }
}

fn fail(out: Option<&Path>, f: Failure) -> ExitCode {
    #[derive(Serialize)]
    struct Envelope<'a> {
        error: &'a Failure,
    }
    let json = serde_json::to_string(&Envelope { error: &f }).unwrap_or_else(|_| f.message.clone());
    eprintln!("{json}");
    if let Some(dir) = out.filter(|d| d.is_dir()) {
        let _ = fs::write(dir.join("error.json"), format!("{json}\n"));
    }
    ExitCode::from(f.code)
}
