//! `metarobust`: generate data, train, evaluate, benchmark and verify
//! gradients from the command line.
//!
//! Exit status is 0 on success, 1 for configuration errors and 2 for
//! runtime failures.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{gather, keys_help, ConfigError, RunConfig, KEYS, SEED_ENV};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<metarobust_core::Error> for Failure {
    fn from(e: metarobust_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn cli() -> Command {
    let mut cmd = Command::new("metarobust")
        .about("Robust meta-learning: MAML, first-order MAML, Reptile and RML on episodic few-shot tasks")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_long_help(keys_help())
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .global(true)
                .help("read `key = value` settings from a file (flags take precedence)"),
        )
        .subcommand(Command::new("gen-data").about("write a synthetic multi-environment dataset as CSV (needs --out)"))
        .subcommand(
            Command::new("train")
                .about("meta-train one algorithm; writes the selected checkpoint (--out) and a training-curve CSV"),
        )
        .subcommand(
            Command::new("eval").about("report accuracy ± 95% CI of a checkpoint (--checkpoint) on novel classes"),
        )
        .subcommand(
            Command::new("benchmark").about("train and evaluate every method in both settings; writes a report"),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("run the finite-difference gradient suite; exits 2 if any check fails")
                .arg(
                    Arg::new("inject-fault")
                        .long("inject-fault")
                        .value_name("PRIMITIVE")
                        .hide(true)
                        .action(ArgAction::Set),
                ),
        );
    for key in KEYS {
        let mut arg = Arg::new(key.name)
            .long(key.flag())
            .value_name("VALUE")
            .global(true)
            .allow_hyphen_values(true)
            .help(format!(
                "{} [default: {}] [{}]",
                key.help,
                key.default,
                key.constraint()
            ));
        if key.flag() != key.name {
            arg = arg.alias(key.name);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn flag_values(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect()
}

fn run(args: impl IntoIterator<Item = OsString>) -> Result<(), Failure> {
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind::*;
            return match e.kind() {
                DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    if e.kind() == DisplayHelpOnMissingArgumentOrSubcommand {
                        Err(Failure::Config("a subcommand is required".into()))
                    } else {
                        Ok(())
                    }
                }
                _ => Err(Failure::Config(e.render().to_string().trim_end().to_string())),
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let raw = gather(std::env::var(SEED_ENV).ok(), file.as_deref(), &flag_values(sub))?;
    let cfg = RunConfig::resolve(&raw)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("cannot start worker pool: {e}")))?;
    }
    match name {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg),
        "benchmark" => commands::benchmark(&cfg),
        "gradcheck" => commands::gradcheck(&cfg, sub.get_one::<String>("inject-fault").map(String::as_str)),
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
