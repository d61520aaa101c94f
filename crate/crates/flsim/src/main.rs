use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use flsim::config::ExperimentConfig;
use flsim::experiment::{bounds_at_horizon, prepare, run_experiment, sweep, RunOptions};

/// Federated learning pipeline simulator.
#[derive(Debug, Parser)]
#[command(name = "flsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write metrics, model and manifest.
    Run {
        config: PathBuf,
        /// Continue from the checkpoint in the output directory, if any.
        #[arg(long)]
        resume: bool,
        /// Stop after this many rounds and leave a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Check a configuration without running it.
    Validate { config: PathBuf },
    /// Print the analytic convergence bounds at the configured horizon.
    Bound { config: PathBuf },
    /// Run once per value of one parameter.
    Sweep {
        config: PathBuf,
        /// Dotted parameter path, e.g. `encoder.step`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            resume,
            stop_after,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_experiment(&cfg, RunOptions { resume, stop_after })?;
            let last = out.state.latest();
            if !out.finished {
                println!("stopped after round {}; checkpoint {}", last.round, out.checkpoint.display());
                return Ok(());
            }
            println!(
                "round {}: train_loss {} test_loss {} test_acc {} delay_s {} bits {}",
                last.round,
                last.train_loss,
                fmt_opt(last.test_loss),
                fmt_opt(last.test_acc),
                last.delay_s,
                last.bits
            );
            println!("metrics  {}", out.metrics.display());
            println!("model    {}", out.model.display());
            println!("manifest {}", out.manifest.display());
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let p = prepare(&cfg)?;
            println!(
                "ok: {} users, {} parameters, {} rounds",
                p.federation.users(),
                p.federation.param_dim(&p.pipeline.loss),
                p.pipeline.schedule.rounds()
            );
        }
        Command::Bound { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for (kind, value) in bounds_at_horizon(&cfg)? {
                println!("{} {}", kind.column(), value);
            }
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("cannot read {}", config.display()))?;
            let doc: toml::Table = text.parse().with_context(|| config.display().to_string())?;
            let base = config.parent().unwrap_or(Path::new("."));
            let points = sweep(&doc, &param, &values, Some(base))?;
            println!("{param},train_loss,test_loss,test_acc,delay_s,bits");
            for p in points {
                println!(
                    "{},{},{},{},{},{}",
                    p.value,
                    p.train_loss,
                    fmt_opt(p.test_loss),
                    fmt_opt(p.test_acc),
                    p.delay_s,
                    p.bits
                );
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}
