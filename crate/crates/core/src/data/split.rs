use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, SplitTag};
use crate::error::{Error, Result};
use crate::seeded_rng;

const SPLIT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub holdout_fraction: f64,
    /// Share of the non-holdout part set aside for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { holdout_fraction: 0.3, validation_fraction: 0.2, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("holdout_fraction", self.holdout_fraction), ("validation_fraction", self.validation_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must lie strictly between 0 and 1, got {f}")));
            }
        }
        Ok(())
    }
}

/// Splits `total = round(N·fraction)` across classes in proportion to their
/// sizes; leftover units go to the largest fractional parts, lower class
/// first on ties.
fn apportion(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let total = (n as f64 * fraction).round() as usize;
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * fraction).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(alloc.iter().sum());
    for &k in order.iter().cycle().take(sizes.len() * 2) {
        if left == 0 {
            break;
        }
        if alloc[k] < sizes[k] {
            alloc[k] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Index sets `(train, validation, holdout)`, each sorted ascending.
pub fn split_indices(labels: &[usize], class_count: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let mut by_class = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(Error::LabelOutOfRange { label: l, classes: class_count });
        }
        by_class[l].push(i);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("class {k} has no samples to split")));
    }
    let mut rng = seeded_rng(spec.seed, SPLIT_STREAM);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let holdout = apportion(&sizes, spec.holdout_fraction);
    let rest: Vec<usize> = sizes.iter().zip(&holdout).map(|(s, h)| s - h).collect();
    let validation = apportion(&rest, spec.validation_fraction);

    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (k, members) in by_class.iter().enumerate() {
        let (h, v) = (holdout[k], validation[k]);
        out[2].extend_from_slice(&members[..h]);
        out[1].extend_from_slice(&members[h..h + v]);
        out[0].extend_from_slice(&members[h + v..]);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Stratified `(train, validation, holdout)` partition.
pub fn split(dataset: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let [train, validation, holdout] = split_indices(&dataset.labels, dataset.class_count, spec)?;
    let tagged = |idx: &[usize], tag| {
        let mut ds = dataset.select(idx);
        ds.split = tag;
        ds
    };
    Ok((
        tagged(&train, SplitTag::Train),
        tagged(&validation, SplitTag::Validation),
        tagged(&holdout, SplitTag::Holdout),
    ))
}
