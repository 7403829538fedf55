//! `paa`: train, apply, inspect, benchmark and self-test patch-level
//! augmentation policies.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
//! 3 missing or unreadable data.

mod augment;
mod bench;
mod error;
mod inspect;
mod selftest;
mod train;

use std::process::ExitCode;

use clap::{value_parser, Arg, Command};

use error::CliError;

fn seed_arg() -> Arg {
    Arg::new("seed")
        .long("seed")
        .value_name("N")
        .value_parser(value_parser!(u64))
        .default_value("0")
        .help("random seed; output is a pure function of the inputs and this seed")
}

fn cli() -> Command {
    Command::new("paa")
        .about("Patch-level automated data augmentation with a multi-agent actor-critic policy")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(train::command())
        .subcommand(augment::command().arg(seed_arg()))
        .subcommand(inspect::command().arg(seed_arg()))
        .subcommand(bench::command().arg(seed_arg()))
        .subcommand(selftest::command().arg(seed_arg()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => train::run(m),
        Some(("augment", m)) => augment::run(m),
        Some(("inspect", m)) => inspect::run(m),
        Some(("bench", m)) => bench::run(m),
        Some(("selftest", m)) => selftest::run(m),
        _ => Err(CliError::Usage("unknown subcommand".into())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        cli().debug_assert();
    }
}
