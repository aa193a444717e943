//! Configuration-driven experiment runner for the perada simulator.

pub mod check;
pub mod config;
pub mod experiment;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use perada_core::metrics_theory::AuditTarget;

pub use config::{parse_config, parse_str, ConfigError, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CHECK: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0} check(s) failed")]
    CheckFailed(usize),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::CheckFailed(_) => EXIT_CHECK,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "perada", version, about = "Personalized federated learning with adapters and server distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (or randomly initialize) the frozen backbone and save it.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every configured variant and ablation; write metrics.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Gradient oracle, relaxation-gap sweep, identity and reduction checks.
    Check {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the client partition manifest only.
    Partition {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
    let cfg = parse_config(path)?;
    config::apply_seed_override(cfg, std::env::var(config::SEED_ENV).ok().as_deref())
}

/// Runs one command, printing progress to stdout.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = load(&config)?;
            let s = experiment::cmd_pretrain(&cfg)?;
            println!("backbone written to {}", s.path.display());
            println!("source accuracy {:.4}", s.source_accuracy);
            if let Some(loss) = s.final_loss {
                println!("final pretraining loss {loss:.4}");
            }
        }
        Command::Partition { config } => {
            let cfg = load(&config)?;
            let path = experiment::cmd_partition(&cfg)?;
            println!("manifest written to {}", path.display());
        }
        Command::Run { config } => {
            let cfg = load(&config)?;
            let results = experiment::cmd_run(&cfg)?;
            println!(
                "{:<40} {:>10} {:>10} {:>10} {:>10}",
                "run", "pers_local", "pers_glob", "glob_local", "glob_glob"
            );
            for r in &results {
                println!(
                    "{:<40} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                    r.run_id,
                    r.report.personalized_local.mean,
                    r.report.personalized_global.mean,
                    r.report.global_model_local.mean,
                    r.report.global_model_global
                );
            }
            println!("metrics written to {}", cfg.output_dir.join(experiment::METRICS_FILE).display());
        }
        Command::Check { config, inject_fault } => {
            let seed = match &config {
                Some(path) => load(path)?.seed,
                None => 0,
            };
            let fault = inject_fault
                .map(|name| {
                    name.parse::<AuditTarget>().map_err(|e| ConfigError {
                        key: "--inject-fault".into(),
                        line: None,
                        message: e.to_string(),
                    })
                })
                .transpose()?;
            let report = check::run_checks(seed, fault)?;
            for line in &report.lines {
                println!("{line}");
            }
            let failures = report.failures();
            if !failures.is_empty() {
                let names: Vec<&str> = failures.iter().map(|l| l.name.as_str()).collect();
                println!("failed: {}", names.join(", "));
                return Err(CliError::CheckFailed(failures.len()));
            }
        }
    }
    Ok(())
}
