use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality on one evaluation set. Precision, recall and F1
/// are macro averages over the classes that occur in the set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub samples: u64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|row| row.len() != k) {
            return Err(Error::dim("metrics", "confusion matrix must be square"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let (mut p_sum, mut r_sum, mut f_sum, mut present) = (0.0, 0.0, 0.0, 0usize);
        for i in 0..k {
            let support: u64 = confusion[i].iter().sum();
            if support == 0 {
                continue;
            }
            present += 1;
            let predicted: u64 = confusion.iter().map(|row| row[i]).sum();
            let tp = confusion[i][i] as f64;
            let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let r = tp / support as f64;
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            p_sum += p;
            r_sum += r;
            f_sum += f;
        }
        let m = present as f64;
        Ok(Self {
            accuracy: correct as f64 / total as f64,
            precision: p_sum / m,
            recall: r_sum / m,
            f1: f_sum / m,
            samples: total,
            confusion,
        })
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], class_count: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::dim("metrics", format!("{} labels but {} predictions", labels.len(), predictions.len())));
        }
        let mut confusion = vec![vec![0u64; class_count]; class_count];
        for (&y, &p) in labels.iter().zip(predictions) {
            for v in [y, p] {
                if v >= class_count {
                    return Err(Error::LabelOutOfRange { label: v, classes: class_count });
                }
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

/// Per-metric mean and spread across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
}

impl AggregateMetrics {
    pub fn of(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pick = |f: fn(&MetricsReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            accuracy: pick(|r| r.accuracy),
            precision: pick(|r| r.precision),
            recall: pick(|r| r.recall),
            f1: pick(|r| r.f1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let m = MetricsReport::from_predictions(&y, &y, 3).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn balanced_binary_confusion() {
        let m = MetricsReport::from_confusion(vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn constant_predictor_is_chance() {
        let y: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let m = MetricsReport::from_predictions(&y, &[3; 100], 10).unwrap();
        assert_eq!(m.accuracy, 0.1);
        assert_eq!(m.confusion.iter().flatten().sum::<u64>(), 100);
    }

    #[test]
    fn absent_classes_are_excluded() {
        // class 2 never occurs: averages run over classes 0 and 1 only
        let m = MetricsReport::from_predictions(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(matches!(MetricsReport::from_predictions(&[], &[], 3), Err(Error::EmptyDataset)));
    }

    #[test]
    fn single_seed_has_zero_spread() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn macro_f1_matches_counting_oracle(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (y, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = MetricsReport::from_predictions(&y, &p, 4).unwrap();
            let mut f1s = Vec::new();
            for c in 0..4 {
                let tp = y.iter().zip(&p).filter(|(&a, &b)| a == c && b == c).count() as f64;
                let fp = y.iter().zip(&p).filter(|(&a, &b)| a != c && b == c).count() as f64;
                let fnn = y.iter().zip(&p).filter(|(&a, &b)| a == c && b != c).count() as f64;
                if tp + fnn == 0.0 {
                    continue;
                }
                // F1 = 2TP / (2TP + FP + FN)
                f1s.push(2.0 * tp / (2.0 * tp + fp + fnn));
            }
            let oracle = f1s.iter().sum::<f64>() / f1s.len() as f64;
            prop_assert!((m.f1 - oracle).abs() < 1e-12);
            let trace: u64 = (0..4).map(|i| m.confusion[i][i]).sum();
            prop_assert_eq!(m.accuracy, trace as f64 / y.len() as f64);
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn mean_lies_within_range(values in prop::collection::vec(-1e3f64..1e3, 1..10)) {
            let (m, s) = mean_std(&values);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
            prop_assert!(s >= 0.0);
        }
    }
}
