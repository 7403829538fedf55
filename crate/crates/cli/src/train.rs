use std::fs;
use std::path::PathBuf;

use clap::{Arg, ArgMatches, Command};
use paa_core::trainer::{checkpoint_config, load_datasets, resume_run, train_run, Checkpoint, TrainConfig};

use crate::error::{CliError, Result};

pub fn command() -> Command {
    let mut cmd = Command::new("train")
        .about("Co-train the policy and the classifier into a run directory")
        .args_override_self(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("`key = value` file; flags override it"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .default_value("run")
                .help("run directory"),
        )
        .arg(
            Arg::new("resume")
                .long("resume")
                .value_name("CKPT")
                .help("continue the run in --out from this checkpoint"),
        );
    for (key, help) in TrainConfig::KEYS {
        cmd = cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help));
    }
    cmd
}

/// Defaults, then the config file, then flags.
pub fn config_from(m: &ArgMatches) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
        config.apply_text(&text).map_err(|e| CliError::Config(e.to_string()))?;
    }
    for (key, _) in TrainConfig::KEYS {
        if let Some(value) = m.get_one::<String>(key) {
            config.set(key, value).map_err(|e| CliError::Config(e.to_string()))?;
        }
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

pub fn run(m: &ArgMatches) -> Result<()> {
    let out = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
    let summary = if let Some(ckpt) = m.get_one::<String>("resume") {
        if m.contains_id("config") || TrainConfig::KEYS.iter().any(|(k, _)| m.contains_id(k)) {
            return Err(CliError::Config(
                "--resume takes its configuration from the checkpoint; drop the other config flags".into(),
            ));
        }
        let ckpt = PathBuf::from(ckpt);
        let config = checkpoint_config(&Checkpoint::load(&ckpt)?)?;
        let (train, test) = load_datasets(&config)?;
        resume_run(&out, &ckpt, &train, &test)?
    } else {
        let config = config_from(m)?;
        let (train, test) = load_datasets(&config)?;
        train_run(config, &out, &train, &test)?
    };
    println!(
        "finished {} epochs in {}: test accuracy {:.4}",
        summary.trainer.epoch(),
        out.display(),
        summary.final_accuracy
    );
    Ok(())
}
