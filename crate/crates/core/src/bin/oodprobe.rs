use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oodprobe::runner::{cmd_dump, cmd_gradcheck, cmd_probe, cmd_report, cmd_train, Experiment, Overrides};
use oodprobe::Error;

#[derive(Parser)]
#[command(name = "oodprobe", version, about = "Train, probe and report environment information in featurizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Restrict to a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to a single algorithm.
    #[arg(long)]
    algorithm: Option<String>,
    /// Restrict to a single held-out environment.
    #[arg(long)]
    test_env: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn experiment(&self) -> Result<Experiment, Error> {
        let o = Overrides {
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            algorithm: self.algorithm.clone(),
            test_env: self.test_env,
            workers: self.workers,
        };
        Experiment::load(&self.config, &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured cell that is not already complete.
    Train(Common),
    /// Fit linear probes on each final checkpoint.
    Probe(Common),
    /// Aggregate metrics into CSV and SVG reports.
    Report(Common),
    /// Write tap activations of held-out images as PGM files.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Finite-difference check of the backward passes.
    Gradcheck {
        #[arg(long, default_value_t = 24)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train(c) => {
            let s = cmd_train(&c.experiment()?)?;
            println!("trained {} cells, skipped {}", s.trained.len(), s.skipped.len());
            for (cell, reason) in &s.failed {
                eprintln!("failed {cell}: {reason}");
            }
            Ok(if s.failed.is_empty() { 0 } else { 4 })
        }
        Command::Probe(c) => {
            let s = cmd_probe(&c.experiment()?)?;
            println!("probed {} taps, skipped {}", s.probed.len(), s.skipped.len());
            Ok(0)
        }
        Command::Report(c) => {
            let s = cmd_report(&c.experiment()?)?;
            for f in &s.files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Command::Dump { common, count } => {
            let seed = common.seed.unwrap_or(0);
            let files = cmd_dump(&common.experiment()?, count, seed)?;
            println!("wrote {} images", files.len());
            Ok(0)
        }
        Command::Gradcheck { cases, seed } => {
            let s = cmd_gradcheck(cases, seed)?;
            let ok = s.max_rel_error < 1e-5;
            println!(
                "{} cases, max relative error {:.3e} (seed {}): {}",
                s.cases,
                s.max_rel_error,
                s.worst_seed,
                if ok { "ok" } else { "FAILED" }
            );
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
