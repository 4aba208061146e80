use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use fedsim::harness::charts::{emit_charts, ChartInputs};
use fedsim::harness::runner::{run_experiment, write_summaries};
use fedsim::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated averaging under client dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default preset config to a file.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
    },
    /// Build the federation described by a config and save it as JSON.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (seed, strategy) pair of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a config once per dropout ratio, each in its own subdirectory.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
    },
    /// Regenerate charts from a finished output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn exit_for(e: &Error) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    if e.is_divergence() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn run_one(cfg: &ExperimentConfig) -> Result<bool, Error> {
    let (outcome, dir) = run_experiment(cfg)?;
    for s in outcome.summaries() {
        println!(
            "seed {:>3}  {:<13} final_acc {:.4}  best_acc {:.4}  sum_e_sq {:.4e}{}",
            s.seed,
            s.strategy.as_str(),
            s.final_accuracy,
            s.best_accuracy,
            s.cumulative_e_sq,
            if s.diverged { "  DIVERGED" } else { "" }
        );
    }
    info!("outputs in {}", dir.display());
    Ok(outcome.any_divergence())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result: Result<bool, Error> = match cli.command {
        Command::InitConfig { out, alpha } => ExperimentConfig::preset(alpha).save(&out).map(|_| false),
        Command::GenerateData { config, seed, out } => ExperimentConfig::load(&config)
            .and_then(|c| c.data.build(seed))
            .and_then(|d| d.save_json(&out))
            .map(|_| false),
        Command::Run { config } => ExperimentConfig::load(&config).and_then(|c| run_one(&c)),
        Command::Sweep { config, alphas } => ExperimentConfig::load(&config).and_then(|base| {
            let root = base.resolved_output_dir();
            let mut diverged = false;
            let mut all = Vec::new();
            for a in alphas {
                let mut cfg = base.clone();
                cfg.dropout.alpha = a;
                cfg.output_dir = root.join(format!("alpha_{a}"));
                // The environment override would send every sweep point to one place.
                std::env::remove_var(fedsim::harness::config::OUTPUT_DIR_ENV);
                cfg.validate()?;
                let (outcome, _) = run_experiment(&cfg)?;
                diverged |= outcome.any_divergence();
                all.extend(outcome.summaries());
            }
            write_summaries(&root.join("sweep_summary.csv"), &all)?;
            Ok(diverged)
        }),
        Command::Report { dir } => ChartInputs::from_dir(&dir)
            .and_then(|i| emit_charts(&i, &dir.join("charts")))
            .map(|paths| {
                for p in paths {
                    println!("{}", p.display());
                }
                false
            }),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => exit_for(&e),
    }
}
