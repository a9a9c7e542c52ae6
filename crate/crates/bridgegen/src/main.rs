use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bridgegen::config::{ConfigError, RunConfig};
use bridgegen::{pipeline, plot};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bridgegen", version, about = "Constraint-bridged generative models on toy physics data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    GenData,
    Train,
    Finetune,
    Sample,
    Eval,
    Plot,
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command, cfg: &RunConfig) -> Result<()> {
    for p in [&cfg.dataset, &cfg.pretrained, &cfg.finetuned, &cfg.samples, &cfg.metrics, &cfg.loss_log, &cfg.plot] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
    }
    match cmd {
        Command::GenData => pipeline::cmd_gen_data(cfg),
        Command::Train => pipeline::cmd_train(cfg),
        Command::Finetune => pipeline::cmd_finetune(cfg),
        Command::Sample => pipeline::cmd_sample(cfg),
        Command::Eval => pipeline::cmd_eval(cfg),
        Command::Plot => plot::cmd_plot(cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(bridgegen::exit_code(&e))
        }
    }
}
