#![allow(dead_code)]

use dcmix::data::{normalize_01, synth_multispectral, LabeledDataset, SynthSpec};
use dcmix::network::{NetworkConfig, Pooling, StageConfig};
use dcmix::tensor::Activation;

pub fn toy_backbone(side: usize, classes: usize) -> NetworkConfig {
    let stage = |out_channels, stride| StageConfig { out_channels, kernel: 3, stride, activation: Activation::Hardswish };
    NetworkConfig {
        stages: vec![stage(4, 1), stage(8, 2)],
        pooling: Pooling::Flatten,
        hidden_width: 0,
        head_activation: Activation::Hardswish,
        class_count: classes,
        input_height: side,
        input_width: side,
        input_channels: 1,
    }
}

pub fn toy_data(samples: usize, seed: u64) -> LabeledDataset {
    let spec = SynthSpec {
        samples,
        signal_channels: 1,
        redundant_channels: 1,
        noise_channels: 1,
        size: 8,
        classes: 2,
        seed,
        ..SynthSpec::default()
    };
    normalize_01(&synth_multispectral(&spec).unwrap())
}

/// Multinomial logistic regression trained by full-batch gradient descent
/// on the chosen channels; returns accuracy on `test`. Features are
/// standardized with training statistics.
pub fn linear_probe(train: &LabeledDataset, test: &LabeledDataset, channels: &[usize], epochs: usize) -> f64 {
    let feats = |ds: &LabeledDataset| -> Vec<Vec<f64>> {
        ds.images
            .iter()
            .map(|im| channels.iter().flat_map(|&c| im.channel(c)).map(f64::from).collect())
            .collect()
    };
    let (xtr, xte) = (feats(train), feats(test));
    let d = xtr[0].len();
    let k = train.class_count;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for x in &xtr {
        for j in 0..d {
            mean[j] += x[j] / xtr.len() as f64;
        }
    }
    for x in &xtr {
        for j in 0..d {
            sd[j] += (x[j] - mean[j]).powi(2) / xtr.len() as f64;
        }
    }
    let z = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / (sd[j].sqrt() + 1e-9)).collect() };
    let (ztr, zte): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (xtr.iter().map(|x| z(x)).collect(), xte.iter().map(|x| z(x)).collect());
    let mut w = vec![vec![0.0; d + 1]; k];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter().map(|row| row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    let lr = 0.1;
    for _ in 0..epochs {
        let mut g = vec![vec![0.0; d + 1]; k];
        for (x, &y) in ztr.iter().zip(&train.labels) {
            let s = scores(&w, x);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in 0..k {
                let delta = e[c] / tot - if c == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c][j] += delta * x[j];
                }
                g[c][d] += delta;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= lr * g[c][j] / ztr.len() as f64;
            }
        }
    }
    let correct = zte
        .iter()
        .zip(&test.labels)
        .filter(|(x, &y)| {
            let s = scores(&w, x);
            (0..k).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap() == y
        })
        .count();
    correct as f64 / test.len() as f64
}
