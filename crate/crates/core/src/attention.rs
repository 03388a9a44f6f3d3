//! Softmax channel-attention baseline.
//!
//! Each input channel is encoded independently by a shared two-layer conv
//! encoder and pooled to an embedding. A learned query scores every
//! embedding by dot product, and a softmax over channels yields per-sample
//! weights that blend the channels into one plane.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::rank_descending;
use crate::network::{conv_stage_flops, dense_flops, FlopCount, Parameterized, StageConfig, StageGeometry};
use crate::tensor::{Activation, ConvSpec, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub channel_count: usize,
    pub hidden_channels: usize,
    pub embedding_width: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl AttentionConfig {
    pub fn new(channel_count: usize, input_height: usize, input_width: usize) -> Self {
        Self {
            channel_count,
            hidden_channels: 8,
            embedding_width: 32,
            input_height,
            input_width,
        }
    }

    fn encoder_stages(&self) -> [StageConfig; 2] {
        let stage = |out_channels| StageConfig {
            out_channels,
            kernel: 3,
            stride: 2,
            activation: Activation::Hardswish,
        };
        [stage(self.hidden_channels), stage(self.embedding_width)]
    }

    fn encoder_geometry(&self) -> Result<Vec<StageGeometry>> {
        let cfg = crate::network::NetworkConfig {
            stages: self.encoder_stages().to_vec(),
            hidden_width: 0,
            pooling: crate::network::Pooling::Average,
            head_activation: Activation::Hardswish,
            class_count: 2,
            input_height: self.input_height,
            input_width: self.input_width,
            input_channels: 1,
        };
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<T> {
    config: AttentionConfig,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> AttentionHead<T> {
    /// He-uniform encoder weights, zero biases and a zero query, so an
    /// untrained head attends uniformly.
    pub fn build(config: AttentionConfig, seed: u64) -> Result<Self> {
        if config.channel_count == 0 {
            return Err(Error::Config("attention needs at least one channel".into()));
        }
        config.encoder_geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut cin = 1;
        for (i, s) in config.encoder_stages().iter().enumerate() {
            let fan_in = s.kernel * s.kernel * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            let kernel = Tensor::from_fn(vec![s.kernel, s.kernel, cin, s.out_channels], |_| {
                T::from_f64_lossy(rand::Rng::gen_range(&mut rng, -bound..bound))
            });
            params.push((format!("encoder{}.kernel", i + 1), kernel.with_grad()));
            params.push((format!("encoder{}.bias", i + 1), Tensor::zeros(vec![s.out_channels]).with_grad()));
            cin = s.out_channels;
        }
        params.push(("query".into(), Tensor::zeros(vec![config.embedding_width, 1]).with_grad()));
        Ok(Self { config, params })
    }

    pub fn from_parameters(config: AttentionConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = Self::build(config.clone(), 0)?;
        if template.params.len() != params.len()
            || template.params.iter().zip(&params).any(|((a, x), (b, y))| a != b || x.shape() != y.shape())
        {
            return Err(Error::Format("attention parameters do not match the configuration".into()));
        }
        let params = params
            .into_iter()
            .map(|(n, mut t)| {
                t.set_requires_grad(true);
                (n, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn channel_count(&self) -> usize {
        self.config.channel_count
    }

    pub fn named_parameters(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn named_parameters_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Zeroes the query, making every channel score equal.
    pub fn zero_scores(&mut self) {
        if let Some((_, q)) = self.params.iter_mut().find(|(n, _)| n == "query") {
            q.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        self.params.iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Records per-sample softmax channel weights `[n, c]`.
    pub fn weights_on(&self, tape: &mut Tape<T>, params: &[Var], image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[3] != self.config.channel_count {
            return Err(Error::dim(
                "attention_weights",
                format!("image {shape:?} must be [n, h, w, {}]", self.config.channel_count),
            ));
        }
        let (n, c) = (shape[0], shape[3]);
        let mut x = tape.channels_to_batch(image)?;
        for (i, s) in self.config.encoder_stages().iter().enumerate() {
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], ConvSpec { stride: s.stride, padding: s.padding() })?;
            x = tape.activation(x, s.activation)?;
        }
        let embedding = tape.global_avg_pool(x)?;
        let scores = tape.matmul(embedding, params[4])?;
        let scores = tape.reshape(scores, &[n, c])?;
        tape.softmax_rows(scores)
    }

    /// Per-sample channel weights; each row lies on the probability simplex.
    pub fn attention_weights(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.params.iter().map(|(_, t)| tape.constant(t)).collect::<Result<Vec<_>>>()?;
        let x = tape.constant(image)?;
        let w = self.weights_on(&mut tape, &params, x)?;
        Ok(tape.tensor(w))
    }

    /// Channels blended with the head's own weights.
    pub fn attention_blend(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let weights = self.attention_weights(image)?;
        weighted_blend(image, &weights)
    }

    /// Per-sample FLOPs of computing the weights and blending `[h, w, c]`.
    pub fn estimate_flops(&self) -> Result<FlopCount> {
        let c = self.config.channel_count as u64;
        let mut flops = FlopCount::default();
        let geoms = self.config.encoder_geometry()?;
        for (i, g) in geoms.iter().enumerate() {
            let (conv, act) = conv_stage_flops(g);
            flops.push(format!("attention.encoder{}.conv", i + 1), c * conv);
            flops.push(format!("attention.encoder{}.activation", i + 1), c * act);
        }
        let last = geoms.last().expect("two encoder stages");
        flops.push("attention.pool", c * (last.out_height * last.out_width * last.out_channels) as u64);
        flops.push("attention.score", c * dense_flops(self.config.embedding_width, 1));
        flops.push("attention.softmax", c);
        flops.push(
            "attention.blend",
            crate::network::blend_flops(self.config.input_height, self.config.input_width, self.config.channel_count),
        );
        Ok(flops)
    }
}

impl<T> Parameterized<T> for AttentionHead<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        self.params.iter().map(|(_, t)| t).collect()
    }
}

/// `out[n,:,:,0] = Σᵢ weights[n,i]·image[n,:,:,i]`
pub fn weighted_blend<T: Scalar>(image: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(image)?;
    let w = tape.constant(weights)?;
    let out = tape.weighted_blend(x, w)?;
    Ok(tape.tensor(out))
}

/// Ranks channels by their mean weight over a dataset (1-based, ties to
/// the lower index).
pub fn attention_importance<T: Scalar>(weights: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(rank_descending(&mean_weights(weights)?))
}

/// Column means of `[N, c]` per-sample weights.
pub fn mean_weights<T: Scalar>(weights: &Tensor<T>) -> Result<Vec<f64>> {
    let shape = weights.shape();
    if shape.len() != 2 {
        return Err(Error::dim("attention_importance", format!("weights must be [N, c], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut means = vec![0.0; c];
    for row in weights.data().chunks_exact(c) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    Ok(means)
}
