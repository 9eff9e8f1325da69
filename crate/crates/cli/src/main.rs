use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ssprop_cli::train::write_json;
use ssprop_cli::{evaluate, exit_code, flops_report, render, train, ExperimentConfig};
use ssprop_core::gradcheck::run_suite;
use ssprop_core::Precision;

#[derive(Parser)]
#[command(
    name = "ssprop",
    version,
    about = "Scheduled channel-wise sparse back-propagation trainer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, summary.json and model.sspn.
    Train { config: PathBuf },
    /// Test accuracy of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Visit test samples in a seeded random order.
        #[arg(long)]
        shuffle_seed: Option<u64>,
    },
    /// Backward-FLOPs report; also written to <output_dir>/flops.json.
    Flops { config: PathBuf },
    /// Finite-difference, adjointness and masked-oracle checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        precision: u32,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config, true)?;
            let out = train(&cfg)?;
            println!(
                "final test accuracy {:.4}; backward FLOPs {} of {} dense ({:.4}); outputs in {}",
                out.summary.final_test_acc,
                out.summary.backward_flops_actual,
                out.summary.backward_flops_dense,
                out.summary.flops_ratio,
                cfg.output_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            config,
            shuffle_seed,
        } => {
            let cfg = ExperimentConfig::load(&config, true)?;
            let report = evaluate(&checkpoint, &cfg, shuffle_seed)?;
            println!(
                "test accuracy {:.4} on {} samples",
                report.accuracy, report.samples
            );
        }
        Command::Flops { config } => {
            let cfg = ExperimentConfig::load(&config, false)?;
            let report = flops_report(&cfg)?;
            print!("{}", render(&report, &cfg));
            std::fs::create_dir_all(&cfg.output_dir)
                .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
            write_json(&cfg.output_dir.join("flops.json"), &report)?;
        }
        Command::Gradcheck { seed, precision } => {
            let precision = Precision::from_bits(precision)
                .map_err(|e| ssprop_cli::ConfigError(vec![e.to_string()]))?;
            let report = run_suite(seed, precision)?;
            println!("{report}");
            if !report.passed() {
                bail!("{} gradient checks failed", report.failures().count());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
