//! Finite-difference verification of every differentiable tape operation.
//!
//! Each case builds a random instance in 64-bit precision, reduces the
//! operation's output to a scalar through a random projection and compares
//! the tape gradient of every input against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionHead};
use crate::error::Result;
use crate::network::{Network, NetworkConfig, Pooling, StageConfig};
use crate::tensor::{grad_check_many, Activation, ConvSpec, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Deep composites accumulate roundoff in coordinates whose gradient is
/// close to zero; a wider step keeps the truncation error negligible there.
const COMPOSITE_EPS: f64 = 1e-4;

/// One checked operation: builds an instance from the generator and returns
/// the worst relative error over its inputs.
pub struct GradcheckCase {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> Result<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub op: String,
    pub instances: usize,
    pub max_error: f64,
    pub passed: bool,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Values kept at least `gap` away from each point in `kinks`.
fn away_from(shape: &[usize], scale: f64, kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.gen_range(-scale..scale);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// `Σ y·r` for a fixed random `r` shaped like `y`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = random(tape.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
    let rv = tape.constant(&r)?;
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

fn worst(errors: Vec<f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    grad_check_many(f, inputs, EPS).map(worst)
}

fn check_composite(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    grad_check_many(f, inputs, COMPOSITE_EPS).map(worst)
}

fn conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (stride, padding) = (rng.gen_range(1..3), rng.gen_range(0..2));
    let seed = rng.gen();
    let inputs = [random(&[2, 5, 5, 2], rng), random(&[3, 3, 2, 3], rng), random(&[3], rng)];
    check(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], ConvSpec { stride, padding })?;
        project(t, y, seed)
    })
}

fn dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[3, 4], rng), random(&[4, 5], rng), random(&[5], rng)];
    check(&inputs, |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        project(t, y, seed)
    })
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[3, 4], rng), random(&[4, 2], rng)];
    check(&inputs, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, seed)
    })
}

fn activation(kind: Activation, kinks: &[f64], rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [away_from(&[16], 5.0, kinks, 1e-2, rng)];
    check(&inputs, |t, v| {
        let y = t.activation(v[0], kind)?;
        project(t, y, seed)
    })
}

fn relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    activation(Activation::Relu, &[0.0], rng)
}

fn hardswish(rng: &mut ChaCha8Rng) -> Result<f64> {
    activation(Activation::Hardswish, &[-3.0, 3.0], rng)
}

fn global_avg_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[2, 3, 4, 5], rng)];
    check(&inputs, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, seed)
    })
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let inputs = [Tensor::from_fn(vec![4, 5], |_| rng.gen_range(-3.0..3.0))];
    check(&inputs, |t, v| t.softmax_cross_entropy(v[0], &labels))
}

fn softmax_rows(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [Tensor::from_fn(vec![3, 4], |_| rng.gen_range(-3.0..3.0))];
    check(&inputs, |t, v| {
        let y = t.softmax_rows(v[0])?;
        project(t, y, seed)
    })
}

fn blend(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[2, 3, 3, 4], rng), Tensor::from_fn(vec![4], |_| rng.gen_range(0.0..1.0))];
    check(&inputs, |t, v| {
        let y = t.blend(v[0], v[1])?;
        project(t, y, seed)
    })
}

fn weighted_blend(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[2, 3, 3, 4], rng), random(&[2, 4], rng)];
    check(&inputs, |t, v| {
        let y = t.weighted_blend(v[0], v[1])?;
        project(t, y, seed)
    })
}

/// Attention weights and blend end to end, with respect to the image and
/// every head parameter.
fn attention_blend(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let cfg = AttentionConfig { hidden_channels: 3, embedding_width: 4, ..AttentionConfig::new(3, 6, 6) };
    let mut head = AttentionHead::<f64>::build(cfg, rng.gen())?;
    // the query starts at zero, which would leave the encoder without gradient
    for (name, p) in head.named_parameters_mut() {
        if name == "query" {
            p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
        }
    }
    let mut inputs = vec![random(&[2, 6, 6, 3], rng)];
    inputs.extend(head.named_parameters().iter().map(|(_, t)| t.clone()));
    check_composite(&inputs, |t, v| {
        let w = head.weights_on(t, &v[1..], v[0])?;
        let y = t.weighted_blend(v[0], w)?;
        project(t, y, seed)
    })
}

fn channels_to_batch(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[2, 3, 3, 4], rng)];
    check(&inputs, |t, v| {
        let y = t.channels_to_batch(v[0])?;
        project(t, y, seed)
    })
}

fn reshape(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[2, 6], rng)];
    check(&inputs, |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y, seed)
    })
}

fn add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[7], rng), random(&[7], rng)];
    check(&inputs, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    })
}

fn mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[7], rng), random(&[7], rng)];
    check(&inputs, |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, seed)
    })
}

fn scale(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (seed, factor) = (rng.gen(), rng.gen_range(-2.0..2.0));
    let inputs = [random(&[7], rng)];
    check(&inputs, |t, v| {
        let y = t.scale(v[0], factor)?;
        project(t, y, seed)
    })
}

fn sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = [random(&[2, 5], rng)];
    check(&inputs, |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    })
}

fn map(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.gen();
    let inputs = [random(&[9], rng)];
    check(&inputs, |t, v| {
        let y = t.map(v[0], f64::sin, f64::cos)?;
        project(t, y, seed)
    })
}

/// The whole backbone, including pooling, hidden layer and head.
fn network(rng: &mut ChaCha8Rng) -> Result<f64> {
    let stage = |out_channels, stride| StageConfig { out_channels, kernel: 3, stride, activation: Activation::Hardswish };
    let pooling = if rng.gen() { Pooling::Flatten } else { Pooling::Average };
    let cfg = NetworkConfig {
        stages: vec![stage(3, 1), stage(4, 2)],
        pooling,
        hidden_width: 5,
        head_activation: Activation::Hardswish,
        class_count: 3,
        input_height: 6,
        input_width: 6,
        input_channels: 1,
    };
    let net = Network::<f64>::build(cfg, rng.gen())?;
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
    let mut inputs = vec![random(&[2, 6, 6, 1], rng)];
    inputs.extend(net.named_parameters().iter().map(|(_, t)| t.clone()));
    check_composite(&inputs, |t, v| {
        let (logits, _) = net.forward_on(t, &v[1..], v[0], false)?;
        t.softmax_cross_entropy(logits, &labels)
    })
}

/// Every differentiable operation, each listed once.
pub fn registered_cases() -> Vec<GradcheckCase> {
    macro_rules! cases {
        ($($f:ident),* $(,)?) => { vec![$(GradcheckCase { name: stringify!($f), run: $f }),*] };
    }
    cases![
        conv2d,
        dense,
        matmul,
        relu,
        hardswish,
        global_avg_pool,
        softmax_cross_entropy,
        softmax_rows,
        blend,
        weighted_blend,
        attention_blend,
        channels_to_batch,
        reshape,
        add,
        mul,
        scale,
        sum,
        map,
        network,
    ]
}

/// Runs `instances` random instances of every case. A case errors out only
/// on an internal failure; exceeding the tolerance marks it as failed.
pub fn run_gradchecks(cases: &[GradcheckCase], instances: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut max_error = 0.0f64;
            for _ in 0..instances {
                max_error = max_error.max((case.run)(&mut rng)?);
            }
            Ok(GradcheckRow { op: case.name.to_string(), instances, max_error, passed: max_error < TOLERANCE })
        })
        .collect()
}
