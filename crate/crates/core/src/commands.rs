//! The command implementations behind the CLI verbs.
//!
//! A prepared data directory holds `train.dcmx`, `validation.dcmx`,
//! `holdout.dcmx` and `manifest.json`. A training directory holds
//! `checkpoint.ckpt`, `report.json`, `alphas.csv`, `history.csv` and the
//! `train.log` sidecar, which is the only file carrying timestamps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataSection, DataSource, RunConfigFile};
use crate::data::{
    add_noise_channels, encode_container, load_mnist_idx, normalize_01, split, subsample,
    synth_multispectral, LabeledDataset, SplitTag,
};
use crate::diagnostics::{registered_cases, run_gradchecks, GradcheckRow};
use crate::error::{Error, Result};
use crate::mixing::rank_descending;
use crate::model::Model;
use crate::network::{count_parameters, NetworkConfig};
use crate::report::{
    read_json, write_alpha_csv, write_history_csv, write_json, ComparedMethod, ComparisonReport, EvaluationReport,
    ImportanceReport,
};
use crate::tensor::Scalar;
use crate::train::{
    channel_importance, checkpoint_precision, decode_checkpoint, encode_checkpoint, evaluate,
    importance_correlation_matrix, top_channel_recovered, train, Checkpoint, Splits,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const ALPHAS_FILE: &str = "alphas.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const LOG_FILE: &str = "train.log";

const SPLIT_FILES: [(SplitTag, &str); 3] = [
    (SplitTag::Train, "train.dcmx"),
    (SplitTag::Validation, "validation.dcmx"),
    (SplitTag::Holdout, "holdout.dcmx"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub samples: usize,
    pub class_histogram: Vec<usize>,
    pub sha256: String,
}

/// What `prepare` produced and from which settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub data: DataSection,
    pub image_side: usize,
    pub channel_count: usize,
    pub class_count: usize,
    pub ground_truth_importance: Option<Vec<usize>>,
    pub noise_channels: Vec<usize>,
    pub files: BTreeMap<String, ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn find_idx(dir: &Path, stems: &[&str], what: &str) -> Result<PathBuf> {
    for stem in stems {
        for name in [format!("{stem}.gz"), stem.to_string()] {
            let p = dir.join(&name);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "MNIST {what} file not found in {}: expected one of {} (optionally .gz); set data.mnist_dir",
        dir.display(),
        stems.join(", ")
    )))
}

/// The full normalized dataset described by `[data]`, before splitting.
pub fn build_dataset(data: &DataSection) -> Result<LabeledDataset> {
    let raw = match data.source {
        DataSource::Mnist => {
            let images = find_idx(&data.mnist_dir, &["images-idx3-ubyte", "train-images-idx3-ubyte"], "image")?;
            let labels = find_idx(&data.mnist_dir, &["labels-idx1-ubyte", "train-labels-idx1-ubyte"], "label")?;
            let mut ds = load_mnist_idx(images, labels)?;
            if data.subsample > 0 && data.subsample != ds.len() {
                ds = subsample(&ds, data.subsample, data.seed)?;
            }
            add_noise_channels(&ds, data.noise_channels, data.seed)?
        }
        DataSource::Synthetic => synth_multispectral(&data.synthetic)?,
    };
    Ok(normalize_01(&raw))
}

/// Builds, splits and caches the dataset. Re-running with an unchanged
/// `[data]` section must reproduce the recorded checksums.
pub fn cmd_prepare(cfg: &RunConfigFile, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let ds = build_dataset(&cfg.data)?;
    let (train, validation, holdout) = split(&ds, &cfg.data.split_spec())?;
    let (h, _, c) = ds.image_shape().ok_or(Error::EmptyDataset)?;
    let mut files = BTreeMap::new();
    let mut blobs = Vec::new();
    for ((tag, file), part) in SPLIT_FILES.iter().zip([&train, &validation, &holdout]) {
        let bytes = encode_container(part)?;
        files.insert(
            tag.name().to_string(),
            ManifestEntry {
                file: file.to_string(),
                samples: part.len(),
                class_histogram: part.class_histogram(),
                sha256: sha256_hex(&bytes),
            },
        );
        blobs.push((*file, bytes));
    }
    let manifest = Manifest {
        data: cfg.data.clone(),
        image_side: h,
        channel_count: c,
        class_count: ds.class_count,
        ground_truth_importance: ds.ground_truth_importance.clone(),
        noise_channels: ds.noise_channels.clone(),
        files,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.is_file() {
        if let Ok(previous) = read_json::<Manifest>(&manifest_path) {
            if previous.data == manifest.data {
                for (name, entry) in &manifest.files {
                    if previous.files.get(name).map(|e| &e.sha256) != Some(&entry.sha256) {
                        return Err(Error::ChecksumMismatch(format!(
                            "{} differs from the checksum recorded in {} for the same [data] settings",
                            entry.file,
                            manifest_path.display()
                        )));
                    }
                }
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    for (file, bytes) in blobs {
        std::fs::write(out_dir.join(file), bytes)?;
    }
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Reads a prepared directory, verifying every container against the manifest.
pub fn load_prepared(data_dir: &Path) -> Result<(Manifest, Splits)> {
    let manifest_path = data_dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "no {MANIFEST_FILE} in {}; run `dcmix prepare` first",
            data_dir.display()
        )));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let mut parts = Vec::new();
    for (tag, _) in SPLIT_FILES {
        let entry = manifest
            .files
            .get(tag.name())
            .ok_or_else(|| Error::Corrupt(format!("manifest lists no {} split", tag.name())))?;
        let path = data_dir.join(&entry.file);
        let bytes = std::fs::read(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::ChecksumMismatch(format!("{} does not match its manifest checksum", path.display())));
        }
        parts.push(crate::data::decode_container(&bytes)?);
    }
    let holdout = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((manifest, Splits { train, validation, holdout }))
}

/// The configured backbone adapted to the prepared images.
pub fn resolve_backbone(network: &NetworkConfig, manifest: &Manifest) -> NetworkConfig {
    NetworkConfig {
        input_height: manifest.image_side,
        input_width: manifest.image_side,
        class_count: manifest.class_count,
        ..network.clone()
    }
}

fn unix_seconds() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Trains one model on prepared data and writes every output file.
pub fn cmd_train<T: Scalar>(cfg: &RunConfigFile, data_dir: &Path, out_dir: &Path, threads: usize) -> Result<ImportanceReport> {
    cfg.validate()?;
    let started = unix_seconds();
    let (manifest, splits) = load_prepared(data_dir)?;
    if manifest.data != cfg.data {
        return Err(Error::Config(format!(
            "{} was prepared from a different [data] section; rerun `dcmix prepare` with this config",
            data_dir.display()
        )));
    }
    let backbone = resolve_backbone(&cfg.network, &manifest);
    let model = Model::<T>::build(cfg.model.kind, &backbone, manifest.channel_count, cfg.train.seed)?;
    let result = train(model, &splits.train, Some(&splits.validation), &cfg.train)?;

    let metrics = evaluate(&result.model, &splits.holdout, threads)?;
    let weights = channel_importance(&result.model, &splits.holdout, threads)?;
    let truth = manifest.ground_truth_importance.clone();
    let recovered = weights.as_ref().zip(truth.as_ref()).map(|(w, t)| top_channel_recovered(w, t[0]));
    let report = ImportanceReport {
        method: cfg.model.kind,
        ranking: weights.as_deref().map(rank_descending),
        channel_weights: weights,
        ground_truth_ranking: truth,
        recovered,
        spearman: BTreeMap::new(),
        parameter_count: count_parameters(&result.model),
        flops: result.model.estimate_flops()?.total(),
        seeds: vec![cfg.train.seed],
        precision: T::NAME.to_string(),
        epochs_completed: result.epochs_completed(),
        stopped_early: result.stopped_early,
        metrics,
        config: cfg.echo(),
    };

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CHECKPOINT_FILE), encode_checkpoint(&result, &cfg.echo())?)?;
    write_json(out_dir.join(REPORT_FILE), &report)?;
    write_alpha_csv(std::fs::File::create(out_dir.join(ALPHAS_FILE))?, &result.alpha_trajectory)?;
    write_history_csv(std::fs::File::create(out_dir.join(HISTORY_FILE))?, &result.history)?;
    let mut log = String::new();
    let _ = writeln!(log, "started_unix {started:.3}");
    let _ = writeln!(log, "finished_unix {:.3}", unix_seconds());
    let _ = writeln!(log, "train_wall_clock_seconds {:.3}", result.wall_clock_seconds.unwrap_or(0.0));
    let _ = writeln!(log, "host {}", std::env::var("HOSTNAME").unwrap_or_else(|_| "unknown".into()));
    let _ = writeln!(log, "threads {threads}");
    let _ = writeln!(log, "dcmix {}", env!("CARGO_PKG_VERSION"));
    std::fs::write(out_dir.join(LOG_FILE), log)?;
    Ok(report)
}

fn evaluate_with<T: Scalar>(bytes: &[u8], splits: &Splits, tag: SplitTag, threads: usize) -> Result<EvaluationReport> {
    let ckpt: Checkpoint<T> = decode_checkpoint(bytes)?;
    let ds = match tag {
        SplitTag::Train => &splits.train,
        SplitTag::Validation => &splits.validation,
        SplitTag::Holdout => &splits.holdout,
        SplitTag::Full => unreachable!("rejected by the caller"),
    };
    let model = &ckpt.result.model;
    Ok(EvaluationReport {
        method: model.kind(),
        split: tag.name().to_string(),
        precision: T::NAME.to_string(),
        channel_weights: channel_importance(model, ds, threads)?,
        metrics: evaluate(model, ds, threads)?,
        config: ckpt.run_config,
    })
}

/// Metrics of a saved checkpoint on one prepared split.
pub fn cmd_evaluate(checkpoint: &Path, data_dir: &Path, split_name: &str, threads: usize) -> Result<EvaluationReport> {
    let tag: SplitTag = split_name.parse()?;
    if tag == SplitTag::Full {
        return Err(Error::InvalidArgument("evaluate needs one of train, validation or holdout".into()));
    }
    let bytes = std::fs::read(checkpoint)?;
    let (_, splits) = load_prepared(data_dir)?;
    match checkpoint_precision(&bytes)?.as_str() {
        "f64" => evaluate_with::<f64>(&bytes, &splits, tag, threads),
        _ => evaluate_with::<f32>(&bytes, &splits, tag, threads),
    }
}

/// Rank correlation between the channel weights of several reports.
pub fn cmd_compare(reports: &[PathBuf]) -> Result<ComparisonReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one report".into()));
    }
    let mut methods: Vec<ComparedMethod> = Vec::new();
    for path in reports {
        let r: ImportanceReport = read_json(path)?;
        let weights = r.channel_weights.ok_or_else(|| {
            Error::InvalidArgument(format!("{} has no channel weights ({} model)", path.display(), r.method.name()))
        })?;
        let base = format!("{}-s{}", r.method.name(), r.seeds.first().copied().unwrap_or(0));
        let n = methods.iter().filter(|m| m.label == base || m.label.starts_with(&format!("{base}#"))).count();
        let label = if n == 0 { base } else { format!("{base}#{}", n + 1) };
        methods.push(ComparedMethod {
            label,
            method: r.method,
            ranking: rank_descending(&weights),
            channel_weights: weights,
            accuracy: r.metrics.accuracy,
        });
    }
    let named: Vec<(String, Vec<f64>)> = methods.iter().map(|m| (m.label.clone(), m.channel_weights.clone())).collect();
    let correlation = importance_correlation_matrix(&named)?;
    Ok(ComparisonReport { methods, correlation })
}

pub fn cmd_gradcheck(instances: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    run_gradchecks(&registered_cases(), instances, seed)
}

pub fn format_gradcheck_table(rows: &[GradcheckRow]) -> String {
    let width = rows.iter().map(|r| r.op.len()).max().unwrap_or(2).max(2);
    let mut out = format!("{:<width$}  {:>9}  {:>13}  status\n", "op", "instances", "max_rel_error");
    for r in rows {
        let status = if r.passed { "pass" } else { "FAIL" };
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>13.3e}  {status}", r.op, r.instances, r.max_error);
    }
    out
}

pub fn format_comparison_table(report: &ComparisonReport) -> String {
    let sorted = report.correlation.sorted();
    let width = report.methods.iter().map(|m| m.label.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  ranking  weights", "method", "accuracy");
    for m in &report.methods {
        let weights: Vec<String> = m.channel_weights.iter().map(|w| format!("{w:.4}")).collect();
        let ranking: Vec<String> = m.ranking.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{:<width$}  {:>8.4}  {:<7}  {}", m.label, m.accuracy, ranking.join(","), weights.join(" "));
    }
    let _ = writeln!(out, "\nspearman rho (clustered order)");
    let _ = write!(out, "{:<width$}", "");
    for name in &sorted.methods {
        let _ = write!(out, "  {name:>width$}");
    }
    out.push('\n');
    for (name, row) in sorted.methods.iter().zip(&sorted.rho) {
        let _ = write!(out, "{name:<width$}");
        for v in row {
            let _ = write!(out, "  {v:>width$.3}");
        }
        out.push('\n');
    }
    out
}

