//! Training, evaluation and importance analysis.
//!
//! Training follows the plain minibatch loop: blend, forward, cross-entropy,
//! backward, one simultaneous update of every trainable tensor, then the
//! nonnegativity projection of the mixing weights. Everything that draws
//! randomness is seeded, and a single-threaded run is bitwise repeatable.

mod checkpoint;
mod metrics;
mod optim;
mod rank;

pub use checkpoint::{checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use metrics::{mean_std, AggregateMetrics, MetricsReport, Summary};
pub use optim::{Optimizer, OptimizerKind, OptimizerSettings};
pub use rank::{average_linkage_order, average_ranks, importance_correlation_matrix, spearman_rho, CorrelationMatrix};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mixing::rank_descending;
use crate::model::{Model, ModelKind};
use crate::network::NetworkConfig;
use crate::seeded_rng;
use crate::tensor::{Scalar, Tape, Tensor};

const SHUFFLE_STREAM: u64 = 6;
const EVAL_BATCH: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without a new best validation accuracy before stopping; 0
    /// disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 15,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum, beta1 and beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Absent when no validation set was given.
    pub validation_accuracy: Option<f64>,
    pub batch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// Channel weights after every epoch: the mixing weights, or the mean
    /// attention weights over the validation set. Empty for the plain model.
    pub alpha_trajectory: Vec<Vec<f64>>,
    pub stopped_early: bool,
    /// Not persisted in checkpoints.
    pub wall_clock_seconds: Option<f64>,
}

impl<T: Scalar> TrainResult<T> {
    pub fn epochs_completed(&self) -> usize {
        self.history.len()
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

/// Trains `model` in place of a copy and returns the final-epoch state.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train_set: &LabeledDataset,
    validation_set: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<TrainResult<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let started = std::time::Instant::now();
    let mut optimizer = Optimizer::new(config.optimizer_settings());
    let mut rng = seeded_rng(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut trajectory = Vec::new();
    let (mut best, mut stale, mut stopped_early) = (f64::NEG_INFINITY, 0usize, false);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut batch_losses = Vec::new();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch_no = b + 1;
            let (x, labels) = train_set.batch::<T>(idx)?;
            let mut tape = Tape::new();
            let step = (|| {
                let xv = tape.constant(&x)?;
                let pass = model.forward_on(&mut tape, xv)?;
                let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
                tape.backward(loss)?;
                Ok::<_, Error>((pass, loss))
            })();
            let (pass, loss) = step.map_err(|e| diverged(e, epoch, batch_no))?;
            let loss_value = tape.value(loss)[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            let classes = tape.shape(pass.logits)[1];
            correct += tape
                .value(pass.logits)
                .chunks_exact(classes)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            let grads: Vec<&[T]> = pass.params.iter().map(|&v| tape.grad(v).expect("parameter leaf")).collect();
            optimizer.step(&mut model.trainables_mut(), &grads);
            model.project();
            loss_sum += loss_value * idx.len() as f64;
            batch_losses.push(loss_value);
        }

        let mut validation_accuracy = None;
        let mut weights = model.mixing().map(|m| m.values().iter().map(|v| v.as_f64()).collect::<Vec<_>>());
        if let Some(val) = validation_set.filter(|v| !v.is_empty()) {
            let out = predict_dataset(&model, val, 1)?;
            validation_accuracy = Some(MetricsReport::from_predictions(&val.labels, &out.predictions, val.class_count)?.accuracy);
            if weights.is_none() {
                weights = out.mean_channel_weights;
            }
        }
        if let Some(w) = weights {
            trajectory.push(w);
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            validation_accuracy,
            batch_losses,
        });
        if let Some(acc) = validation_accuracy {
            if acc > best {
                best = acc;
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience && epoch < config.epochs {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainResult {
        model,
        config: config.clone(),
        history,
        alpha_trajectory: trajectory,
        stopped_early,
        wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
    })
}

/// Predicted classes and, for the attention model, the dataset-mean
/// attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub predictions: Vec<usize>,
    pub mean_channel_weights: Option<Vec<f64>>,
}

/// Inference over `dataset`, sharded into contiguous blocks across up to
/// `threads` workers. Every sample's forward pass is independent of the
/// others, so the result does not depend on `threads`.
pub fn predict_dataset<T: Scalar>(model: &Model<T>, dataset: &LabeledDataset, threads: usize) -> Result<Predictions> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len();
    let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(EVAL_BATCH).map(<[usize]>::to_vec).collect();
    let run = |idx: &[usize]| -> Result<(Vec<usize>, Option<Vec<T>>)> {
        let (x, _) = dataset.batch::<T>(idx)?;
        let (logits, weights): (Tensor<T>, Option<Tensor<T>>) = model.predict(&x)?;
        let classes = logits.shape()[1];
        let preds = logits.data().chunks_exact(classes).map(argmax).collect();
        Ok((preds, weights.map(Tensor::into_data)))
    };
    let threads = threads.clamp(1, chunks.len());
    let results: Vec<Result<(Vec<usize>, Option<Vec<T>>)>> = if threads == 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(move || group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut predictions = Vec::with_capacity(n);
    let mut weight_rows: Vec<T> = Vec::new();
    for r in results {
        let (p, w) = r?;
        predictions.extend(p);
        if let Some(w) = w {
            weight_rows.extend(w);
        }
    }
    let mean_channel_weights = (!weight_rows.is_empty()).then(|| {
        let c = weight_rows.len() / n;
        let mut mean = vec![0.0f64; c];
        for row in weight_rows.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        mean
    });
    Ok(Predictions { predictions, mean_channel_weights })
}

pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &LabeledDataset, threads: usize) -> Result<MetricsReport> {
    let out = predict_dataset(model, dataset, threads)?;
    MetricsReport::from_predictions(&dataset.labels, &out.predictions, dataset.class_count)
}

/// Reported channel importances: the mixing weights, or the attention
/// weights averaged over `dataset`. `None` for the plain model.
pub fn channel_importance<T: Scalar>(model: &Model<T>, dataset: &LabeledDataset, threads: usize) -> Result<Option<Vec<f64>>> {
    match model {
        Model::Plain { .. } => Ok(None),
        Model::Dcmix { mixing, .. } => Ok(Some(mixing.values().iter().map(|v| v.as_f64()).collect())),
        Model::Attention { .. } => Ok(predict_dataset(model, dataset, threads)?.mean_channel_weights),
    }
}

/// Whether the weight of 1-based channel `top` is strictly above every other.
pub fn top_channel_recovered(weights: &[f64], top: usize) -> bool {
    let k = top - 1;
    weights.iter().enumerate().all(|(i, &w)| i == k || weights[k] > w)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub holdout: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub weights: Option<Vec<f64>>,
    pub ranking: Option<Vec<usize>>,
    pub recovered: Option<bool>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub model: ModelKind,
    pub seeds: Vec<SeedOutcome>,
    pub metrics: AggregateMetrics,
    pub mean_weights: Option<Vec<f64>>,
    /// Fraction of seeds whose strictly largest weight sits on the
    /// ground-truth top channel.
    pub recovery_rate: Option<f64>,
}

/// Trains and evaluates one model per seed. Seeds run concurrently on up to
/// `threads` workers; each run is itself single-threaded, so the report does
/// not depend on `threads`.
pub fn multi_seed_run<T: Scalar>(
    splits: &Splits,
    kind: ModelKind,
    backbone: &NetworkConfig,
    config: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<(MultiSeedReport, Vec<TrainResult<T>>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let channels = splits.train.channel_count();
    let one = |seed: u64| -> Result<(SeedOutcome, TrainResult<T>)> {
        let model = Model::<T>::build(kind, backbone, channels, seed)?;
        let cfg = TrainConfig { seed, ..config.clone() };
        let result = train(model, &splits.train, Some(&splits.validation), &cfg)?;
        let metrics = evaluate(&result.model, &splits.holdout, 1)?;
        let weights = channel_importance(&result.model, &splits.holdout, 1)?;
        let truth = splits.holdout.ground_truth_importance.as_ref();
        let recovered = weights.as_ref().zip(truth).map(|(w, t)| top_channel_recovered(w, t[0]));
        let outcome = SeedOutcome {
            seed,
            metrics,
            ranking: weights.as_deref().map(rank_descending),
            weights,
            recovered,
            epochs: result.epochs_completed(),
        };
        Ok((outcome, result))
    };
    let threads = threads.clamp(1, seeds.len());
    let runs: Vec<Result<(SeedOutcome, TrainResult<T>)>> = if threads == 1 {
        seeds.iter().map(|&s| one(s)).collect()
    } else {
        let per = seeds.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds
                .chunks(per)
                .map(|group| s.spawn(move || group.iter().map(|&seed| one(seed)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
        })
    };
    let (outcomes, results): (Vec<_>, Vec<_>) = runs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let metrics = AggregateMetrics::of(&outcomes.iter().map(|o| o.metrics.clone()).collect::<Vec<_>>())?;
    let mean_weights = outcomes.iter().map(|o| o.weights.clone()).collect::<Option<Vec<_>>>().map(|ws| {
        let c = ws[0].len();
        (0..c).map(|i| ws.iter().map(|w| w[i]).sum::<f64>() / ws.len() as f64).collect()
    });
    let recovery_rate = outcomes
        .iter()
        .map(|o| o.recovered)
        .collect::<Option<Vec<_>>>()
        .map(|r| r.iter().filter(|&&x| x).count() as f64 / r.len() as f64);
    Ok((MultiSeedReport { model: kind, seeds: outcomes, metrics, mean_weights, recovery_rate }, results))
}
