//! Command-line front end: corpus generation, embedder training, attack
//! and sweep runs, and report summarization.
//!
//! Errors exit nonzero with a machine-readable JSON record on stderr.
//! `GRADLAB_THREADS` caps worker parallelism.

use clap::{Parser, Subcommand};
use gradlab::corpus::{generate_corpus, load_corpus, save_corpus, CorpusConfig};
use gradlab::error::{GradLabError, Result};
use gradlab::experiment::{
    run_experiment, sweep, sweep_summary, ExperimentConfig, ExperimentReport,
};
use gradlab::speaker::{save_encoder, train_embedder, TripletTrainConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "gradlab", about = "Gradient-leakage laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write it to a directory.
    GenCorpus {
        /// Corpus configuration JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for feature CSVs and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a speaker embedder on a stored corpus.
    TrainEmbedder {
        /// Directory written by gen-corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Training configuration JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Leading utterances per speaker used for training.
        #[arg(long, default_value_t = 5)]
        enroll_per_speaker: usize,
    },
    /// Run one experiment from an ExperimentConfig JSON file.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Override the report directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of experiments (JSON array of ExperimentConfig) sharing
    /// corpus and embedder, and write a summary table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Directory for per-point reports and summary.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the aggregate of stored reports as a CSV table.
    Report {
        /// Report directories (each containing aggregate.json).
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn print_summary_line(label: &str, report: &ExperimentReport) {
    println!(
        "{label}: attacked={} failed={} top1={:.3} top5={:.3} mrr={:.3} mean_mae={:.4}",
        report.aggregate.attacked,
        report.aggregate.failed,
        report.aggregate.top1,
        report.aggregate.top5,
        report.aggregate.mrr,
        report.aggregate.mean_mae
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { config, out } => {
            let cfg: CorpusConfig = match config {
                Some(p) => read_json(&p)?,
                None => CorpusConfig::default(),
            };
            let corpus = generate_corpus(&cfg)?;
            save_corpus(&corpus, &out)?;
            println!(
                "wrote {} utterances from {} speakers to {}",
                corpus.utterances.len(),
                corpus.speakers.len(),
                out.display()
            );
        }
        Command::TrainEmbedder { corpus, config, out, enroll_per_speaker } => {
            let corpus = load_corpus(&corpus)?;
            let cfg: TripletTrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TripletTrainConfig::default(),
            };
            let train_ids: Vec<usize> = corpus
                .speakers
                .iter()
                .flat_map(|s| {
                    corpus
                        .utterances_of(s.speaker_id)
                        .take(enroll_per_speaker)
                        .map(|u| u.id)
                        .collect::<Vec<_>>()
                })
                .collect();
            let encoder = train_embedder(&corpus, &train_ids, &cfg)?;
            save_encoder(&out, &encoder)?;
            println!("wrote embedder checkpoint to {}", out.display());
        }
        Command::Attack { config, out } => {
            let mut cfg: ExperimentConfig = read_json(&config)?;
            if let Some(dir) = out {
                cfg.output_dir = Some(dir);
            }
            let report = run_experiment(&cfg)?;
            print_summary_line(&cfg.mode.label(), &report);
            if let Some(dir) = &cfg.output_dir {
                println!("report written to {}", dir.display());
            }
        }
        Command::Sweep { config, out } => {
            let mut grid: Vec<ExperimentConfig> = read_json(&config)?;
            std::fs::create_dir_all(&out)?;
            for (i, cfg) in grid.iter_mut().enumerate() {
                if cfg.output_dir.is_none() {
                    cfg.output_dir = Some(out.join(format!("point_{i:02}")));
                }
            }
            let reports = sweep(&grid)?;
            let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
            w.write_record(["mode", "defense", "top1", "top5", "mrr", "mean_mae"])?;
            for ((mode, defense, m, mean_mae), report) in
                sweep_summary(&reports).into_iter().zip(&reports)
            {
                w.write_record([
                    mode.clone(),
                    defense,
                    format!("{:.6}", m.top1),
                    format!("{:.6}", m.top5),
                    format!("{:.6}", m.mrr),
                    format!("{mean_mae:.6}"),
                ])?;
                print_summary_line(&mode, report);
            }
            w.flush()?;
            println!("summary written to {}", out.join("summary.csv").display());
        }
        Command::Report { dirs } => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record([
                "dir", "mode", "defense", "attacked", "failed", "top1", "top5", "mrr",
                "mean_mae",
            ])?;
            for dir in dirs {
                let agg: serde_json::Value = read_json(&dir.join("aggregate.json"))?;
                let report: ExperimentReport = serde_json::from_value(serde_json::json!({
                    "config": agg["config"],
                    "rows": [],
                    "aggregate": agg["aggregate"],
                }))?;
                w.write_record([
                    dir.display().to_string(),
                    report.config.mode.label(),
                    format!("{:?}", report.config.defense),
                    report.aggregate.attacked.to_string(),
                    report.aggregate.failed.to_string(),
                    format!("{:.6}", report.aggregate.top1),
                    format!("{:.6}", report.aggregate.top5),
                    format!("{:.6}", report.aggregate.mrr),
                    format!("{:.6}", report.aggregate.mean_mae),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn error_kind(e: &GradLabError) -> &'static str {
    match e {
        GradLabError::InfeasibleAlignment { .. } => "infeasible_alignment",
        GradLabError::EnumerationTooLarge { .. } => "enumeration_too_large",
        GradLabError::ShapeMismatch { .. } => "shape_mismatch",
        GradLabError::ZeroGradient { .. } => "zero_gradient",
        GradLabError::DegenerateStd { .. } => "degenerate_std",
        GradLabError::InsufficientCorpus(_) => "insufficient_corpus",
        GradLabError::InvalidConfig(_) => "invalid_config",
        GradLabError::Io(_) => "io",
        GradLabError::Json(_) => "json",
        GradLabError::Csv(_) => "csv",
    }
}

fn main() {
    if let Ok(threads) = std::env::var("GRADLAB_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!(
                    "{}",
                    serde_json::json!({"error": {
                        "kind": "invalid_config",
                        "message": format!("GRADLAB_THREADS={threads} is not a positive integer"),
                    }})
                );
                std::process::exit(2);
            }
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!(
            "{}",
            serde_json::json!({"error": {"kind": error_kind(&e), "message": e.to_string()}})
        );
        std::process::exit(1);
    }
}
