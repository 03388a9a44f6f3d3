//! Machine-readable outputs. Channel indices are 1-based everywhere.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelKind;
use crate::train::{CorrelationMatrix, EpochRecord, MetricsReport};

/// Outcome of one training run: importances, cost and holdout quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceReport {
    pub method: ModelKind,
    /// Absent for the plain model, which has no channel weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_ranking: Option<Vec<usize>>,
    /// Whether the ground-truth top channel holds the strictly largest weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovered: Option<bool>,
    /// Rank correlation with other methods' weights, filled in by `compare`.
    #[serde(default)]
    pub spearman: BTreeMap<String, f64>,
    pub parameter_count: usize,
    pub flops: u64,
    pub seeds: Vec<u64>,
    pub precision: String,
    pub epochs_completed: usize,
    pub stopped_early: bool,
    pub metrics: MetricsReport,
    pub config: serde_json::Value,
}

/// Metrics of a checkpoint on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub method: ModelKind,
    pub split: String,
    pub precision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_weights: Option<Vec<f64>>,
    pub metrics: MetricsReport,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparedMethod {
    pub label: String,
    pub method: ModelKind,
    pub channel_weights: Vec<f64>,
    pub ranking: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub methods: Vec<ComparedMethod>,
    pub correlation: CorrelationMatrix,
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn csv_error(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

/// `epoch,alpha_1,…,alpha_c`, one row per completed epoch.
pub fn write_alpha_csv(out: impl Write, trajectory: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let c = trajectory.first().map_or(0, Vec::len);
    let mut header = vec!["epoch".to_string()];
    header.extend((1..=c).map(|i| format!("alpha_{i}")));
    w.write_record(&header).map_err(csv_error)?;
    for (e, row) in trajectory.iter().enumerate() {
        let mut rec = vec![(e + 1).to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_csv(out: impl Write, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "train_accuracy", "validation_accuracy"]).map_err(csv_error)?;
    for h in history {
        let val = h.validation_accuracy.map_or(String::new(), |v| v.to_string());
        w.write_record([h.epoch.to_string(), h.train_loss.to_string(), h.train_accuracy.to_string(), val])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Square matrix with a header row and a leading label column.
pub fn write_matrix_csv(out: impl Write, m: &CorrelationMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(m.methods.iter().cloned());
    w.write_record(&header).map_err(csv_error)?;
    for (name, row) in m.methods.iter().zip(&m.rho) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
