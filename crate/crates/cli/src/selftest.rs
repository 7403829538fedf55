use clap::{value_parser, Arg, ArgMatches, Command};
use paa_core::selfcheck::{run_bandit_checks, run_grad_checks, run_kernel_checks, CheckOutcome, Fault};

use crate::error::{runtime, CliError, Result};

pub fn command() -> Command {
    Command::new("selftest")
        .about("Run the gradient, kernel and bandit checks")
        .arg(
            Arg::new("only")
                .long("only")
                .value_name("SUITE")
                .value_parser(["grad", "kernel", "bandit"])
                .help("run a single suite"),
        )
        .arg(
            Arg::new("inject-fault")
                .long("inject-fault")
                .value_name("FAULT")
                .value_parser(["conv-backward"])
                .help("break a rule on purpose to confirm the checks catch it"),
        )
        .arg(
            Arg::new("instances")
                .long("instances")
                .value_name("N")
                .value_parser(value_parser!(u64))
                .default_value("20")
                .help("random instances per gradient case"),
        )
        .arg(
            Arg::new("plans")
                .long("plans")
                .value_name("N")
                .value_parser(value_parser!(u64))
                .default_value("100")
                .help("random plans for the executor comparison"),
        )
        .arg(
            Arg::new("bandit-seeds")
                .long("bandit-seeds")
                .value_name("N")
                .value_parser(value_parser!(u64))
                .default_value("1")
                .help("bandit runs, seeded from --seed upward"),
        )
}

pub fn run(m: &ArgMatches) -> Result<()> {
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let only = m.get_one::<String>("only").map(String::as_str);
    let fault = m
        .get_one::<String>("inject-fault")
        .map(|f| f.parse::<Fault>())
        .transpose()
        .map_err(CliError::Usage)?;
    let wants = |suite: &str| only.is_none_or(|o| o == suite);

    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    if wants("grad") {
        let instances = *m.get_one::<u64>("instances").expect("defaulted");
        outcomes.extend(run_grad_checks(instances, seed, fault));
    }
    if wants("kernel") {
        let plans = *m.get_one::<u64>("plans").expect("defaulted");
        outcomes.extend(run_kernel_checks(plans, seed));
    }
    if wants("bandit") {
        let n = *m.get_one::<u64>("bandit-seeds").expect("defaulted");
        let seeds: Vec<u64> = (0..n).map(|i| seed.wrapping_add(i)).collect();
        outcomes.extend(run_bandit_checks(&seeds, 0.9));
    }
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    println!("{} checks, {} failed", outcomes.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("failed checks: {}", failed.join(", "))))
    }
}
