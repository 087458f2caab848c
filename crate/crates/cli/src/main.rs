use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metareg_core::episodes::{EpisodeShape, Split};
use metareg_core::gradsuite;
use metareg_core::models::{read_header, Checkpoint};
use metareg_core::trainer::{
    self, classification_report, read_jsonl, JsonlWriter, PredictionRecord, Precision, RunConfig,
};
use metareg_core::{Error, Scalar};

#[derive(Parser)]
#[command(name = "metareg", version, about = "Few-shot episodic training with meta-task regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Multiplies every episode count, for short runs.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Evaluate a checkpoint on episodes from one split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        way: usize,
        #[arg(long)]
        shot: usize,
        #[arg(long)]
        query: usize,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes the per-episode query predictions as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Per-class precision, recall and F1 from a prediction log.
    Report {
        #[arg(long)]
        log: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Random cases per check.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Run(Error),
    ChecksFailed(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        return 3;
    }
    match e {
        Error::Config(_)
        | Error::InsufficientClasses { .. }
        | Error::InsufficientImages { .. }
        | Error::ClassInMultipleSplits(_)
        | Error::ImageSizeMismatch { .. }
        | Error::Image { .. } => 2,
        _ => 1,
    }
}

fn train_as<T: Scalar>(cfg: RunConfig) -> Result<(), Failure> {
    let out = trainer::train::<T>(cfg.clone())?;
    for s in &out.summaries {
        println!(
            "{:<6} episodes {:>6}  acc {:.4} ± {:.4}  loss {:.4} ± {:.4}",
            s.split, s.episodes, s.acc_mean, s.acc_std, s.loss_mean, s.loss_std
        );
    }
    println!("checkpoint {} (checksum {:016x})", cfg.checkpoint.display(), out.final_checksum);
    println!("metrics {}  summary {}", cfg.metrics_log.display(), cfg.summary_csv.display());
    Ok(())
}

fn eval_as<T: Scalar>(
    path: &PathBuf,
    split: Split,
    shape: EpisodeShape,
    episodes: usize,
    seed: u64,
    predictions: Option<&PathBuf>,
) -> Result<(), Failure> {
    let ckpt = Checkpoint::<T>::load(path)?;
    let out = trainer::evaluate_checkpoint(&ckpt, split, shape, episodes, seed)?;
    if let Some(p) = predictions {
        let mut w = JsonlWriter::create(p)?;
        for rec in &out.predictions {
            w.write(rec)?;
        }
        w.flush()?;
    }
    println!("{}", serde_json::to_string(&out.summary).map_err(Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, seed, scale } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = scale {
                cfg = cfg.scaled(f)?;
            }
            match cfg.precision {
                Precision::F32 => train_as::<f32>(cfg),
                Precision::F64 => train_as::<f64>(cfg),
            }
        }
        Command::Eval {
            checkpoint,
            split,
            way,
            shot,
            query,
            episodes,
            seed,
            predictions,
        } => {
            if split == Split::Train {
                return Err(Error::Config("eval split must be val or test".into()).into());
            }
            let shape = EpisodeShape::new(way, shot, query);
            shape.validate().map_err(|e| Error::Config(e.to_string()))?;
            if episodes == 0 {
                return Err(Error::Config("episodes must be at least 1".into()).into());
            }
            let header = read_header(&checkpoint)?;
            match header.scalar.as_str() {
                "f32" => eval_as::<f32>(&checkpoint, split, shape, episodes, seed, predictions.as_ref()),
                "f64" => eval_as::<f64>(&checkpoint, split, shape, episodes, seed, predictions.as_ref()),
                other => Err(Error::Checkpoint(format!("unknown precision {other:?}")).into()),
            }
        }
        Command::Report { log } => {
            let records: Vec<PredictionRecord> = read_jsonl(&log)?;
            println!("{}", classification_report(&records)?);
            Ok(())
        }
        Command::Gradcheck { cases, seed } => {
            let summary = gradsuite::run_suite(cases, seed)?;
            println!("{:<26} {:>6} {:>12}", "check", "cases", "max rel err");
            for (name, (n, worst)) in summary.per_check() {
                let mark = if worst < gradsuite::SUITE_TOL { "ok" } else { "FAIL" };
                println!("{name:<26} {n:>6} {worst:>12.3e}  {mark}");
            }
            let failed = summary.failures().len();
            println!(
                "{} cases ({} redrawn at kinks), max rel err {:.3e}, tolerance {:.0e}",
                summary.results.len(),
                summary.redraws(),
                summary.max_rel_err(),
                gradsuite::SUITE_TOL
            );
            if failed > 0 {
                return Err(Failure::ChecksFailed(failed));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::ChecksFailed(n)) => {
            eprintln!("error: {n} gradient checks failed");
            ExitCode::from(1)
        }
    }
}
