use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dcmix::commands::{self, Precision};
use dcmix::config::{data_dir, RunConfigFile, DATA_DIR_ENV};
use dcmix::report::{write_json, write_matrix_csv};

/// Differentiable channel mixing: data preparation, training and reports.
#[derive(Parser)]
#[command(name = "dcmix", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, default_value = "f32", value_parser = parse_precision)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, split and cache the dataset.
    Prepare,
    /// Train one model on prepared data.
    Train {
        /// Prepared data directory.
        #[arg(long, env = DATA_DIR_ENV)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long, env = DATA_DIR_ENV)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "holdout")]
        split: String,
    },
    /// Rank-correlate the channel weights of several reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: dcmix::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfigFile> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfigFile::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn prepared_dir(explicit: Option<&PathBuf>) -> PathBuf {
    data_dir(explicit.map(PathBuf::as_path), "prepared".as_ref())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Prepare => {
            let cfg = load_config(&cli)?;
            let out = prepared_dir(cli.out.as_ref());
            let manifest = commands::cmd_prepare(&cfg, &out)?;
            println!("prepared {} ({} channels, {} classes)", out.display(), manifest.channel_count, manifest.class_count);
            for (name, entry) in &manifest.files {
                println!("  {name:<10} {:>6} samples  {}", entry.samples, entry.sha256);
            }
        }
        Command::Train { data } => {
            let cfg = load_config(&cli)?;
            let data = prepared_dir(data.as_ref());
            let out = cli.out.clone().unwrap_or_else(|| format!("runs/{}-s{}", cfg.model.kind.name(), cfg.train.seed).into());
            let report = match cli.precision {
                Precision::F32 => commands::cmd_train::<f32>(&cfg, &data, &out, cli.threads)?,
                Precision::F64 => commands::cmd_train::<f64>(&cfg, &data, &out, cli.threads)?,
            };
            println!(
                "{} seed {}: holdout accuracy {:.4}, {} epochs",
                report.method.name(),
                cfg.train.seed,
                report.metrics.accuracy,
                report.epochs_completed
            );
            if let (Some(w), Some(r)) = (&report.channel_weights, &report.ranking) {
                let w: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
                let r: Vec<String> = r.iter().map(usize::to_string).collect();
                println!("channel weights {}  ranking {}", w.join(" "), r.join(","));
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate { checkpoint, data, split } => {
            let report = commands::cmd_evaluate(checkpoint, &prepared_dir(data.as_ref()), split, cli.threads)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                write_json(out.join(format!("evaluation-{split}.json")), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Compare { reports } => {
            let report = commands::cmd_compare(reports)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                write_json(out.join("compare.json"), &report)?;
                write_matrix_csv(std::fs::File::create(out.join("compare.csv"))?, &report.correlation.sorted())?;
            }
            print!("{}", commands::format_comparison_table(&report));
        }
        Command::Gradcheck { instances } => {
            let seed = cli.seed.unwrap_or(0);
            let rows = commands::cmd_gradcheck(*instances, seed)?;
            print!("{}", commands::format_gradcheck_table(&rows));
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                write_json(out.join("gradcheck.json"), &rows)?;
            }
            return Ok(rows.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
