use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use l2o::experiment::{run_stage, Stage};
use l2o::formats::RunDir;
use l2o::ExperimentConfig;

#[derive(Parser)]
#[command(name = "l2o", version, about = "Train, run and certify implicit L2O models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset
    Gen(Args),
    /// Train model weights (generates data if missing)
    Train(Args),
    /// Run inference on train and test data
    Infer(Args),
    /// Calibrate certificates and label test inferences
    Certify(Args),
    /// Write and print the run report
    Report(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON experiment config
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
    /// Exit with status 2 when the guard rejects any test inference
    #[arg(long)]
    strict: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Gen(a) => (Stage::Gen, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Infer(a) => (Stage::Infer, a),
        Command::Certify(a) => (Stage::Certify, a),
        Command::Report(a) => (Stage::Report, a),
    };
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    cfg.seed = args.seed;
    cfg.out = Some(args.out.clone());
    let dir = RunDir::new(&args.out);
    match run_stage(&cfg, &dir, stage) {
        Ok(Some(report)) => {
            print!("{}", report.summary());
            if args.strict && report.any_rejected() {
                let n = report.records.iter().filter(|r| r.outcome == l2o_core::certs::GuardOutcome::Rejected).count();
                eprintln!("guard rejected {n} of {} test inferences", report.records.len());
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Ok(None) => {
            println!("{stage} done: {}", dir.root.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
