//! Compact CNN classifier with parameter and FLOP accounting.
//!
//! Stages are `conv → activation` with "same"-style padding `(k−1)/2`,
//! followed by global average pooling, an optional hidden dense layer and
//! the class head. FLOPs count one multiply-accumulate as two operations
//! and are reported per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvSpec, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

fn default_activation() -> Activation {
    Activation::Hardswish
}

impl StageConfig {
    pub fn padding(&self) -> usize {
        (self.kernel.saturating_sub(1)) / 2
    }

    fn output_side(&self, side: usize) -> Option<usize> {
        let padded = side + 2 * self.padding();
        (padded >= self.kernel && side > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// How the last feature map is turned into a vector for the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Global average over positions: `c` features.
    Average,
    /// Row-major flattening: `h·w·c` features that keep spatial layout.
    #[default]
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub stages: Vec<StageConfig>,
    pub pooling: Pooling,
    /// Width of the hidden dense layer; 0 puts the class head directly on
    /// the pooled features.
    pub hidden_width: usize,
    pub head_activation: Activation,
    pub class_count: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    /// Four hardswish stages 8→16→32→64 on 28×28 single-plane input,
    /// downsampling by 2 on stages 2–4, the 4×4×64 map flattened into a
    /// 64-wide hidden layer, and 10 classes.
    fn default() -> Self {
        let stage = |out_channels, stride| StageConfig {
            out_channels,
            kernel: 3,
            stride,
            activation: Activation::Hardswish,
        };
        Self {
            stages: vec![stage(8, 1), stage(16, 2), stage(32, 2), stage(64, 2)],
            hidden_width: 64,
            pooling: Pooling::Flatten,
            head_activation: Activation::Hardswish,
            class_count: 10,
            input_height: 28,
            input_width: 28,
            input_channels: 1,
        }
    }
}

/// Shape bookkeeping of one conv stage, per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub in_height: usize,
    pub in_width: usize,
    pub in_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<Vec<StageGeometry>> {
        if self.class_count < 2 {
            return Err(Error::Config(format!("class_count must be at least 2, got {}", self.class_count)));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, self.input_channels);
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("input size {h}x{w} is empty")));
        }
        let mut geoms = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 0 || s.kernel == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!(
                    "stage {}: stride, kernel and out_channels must be at least 1",
                    i + 1
                )));
            }
            let (Some(oh), Some(ow)) = (s.output_side(h), s.output_side(w)) else {
                return Err(Error::Config(format!(
                    "stage {}: spatial size collapses to zero ({h}x{w} input, kernel {})",
                    i + 1,
                    s.kernel
                )));
            };
            geoms.push(StageGeometry {
                in_height: h,
                in_width: w,
                in_channels: c,
                out_height: oh,
                out_width: ow,
                out_channels: s.out_channels,
                kernel: s.kernel,
            });
            (h, w, c) = (oh, ow, s.out_channels);
        }
        Ok(geoms)
    }

    /// Last feature map `(h, w, c)` before pooling.
    fn final_map(&self) -> (usize, usize, usize) {
        match self.validate().ok().and_then(|g| g.last().copied()) {
            Some(g) => (g.out_height, g.out_width, g.out_channels),
            None => (self.input_height, self.input_width, self.input_channels),
        }
    }

    /// Features reaching the head after pooling.
    pub fn feature_width(&self) -> usize {
        let (h, w, c) = self.final_map();
        match self.pooling {
            Pooling::Average => c,
            Pooling::Flatten => h * w * c,
        }
    }

    /// Parameter count derived from the layer formulas alone.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        let mut c = self.input_channels;
        for s in &self.stages {
            total += s.kernel * s.kernel * c * s.out_channels + s.out_channels;
            c = s.out_channels;
        }
        c = self.feature_width();
        if self.hidden_width > 0 {
            total += (c + 1) * self.hidden_width;
            c = self.hidden_width;
        }
        total + (c + 1) * self.class_count
    }
}

/// Anything that owns trainable tensors.
pub trait Parameterized<T> {
    fn parameters(&self) -> Vec<&Tensor<T>>;
}

impl<T> Parameterized<T> for [Tensor<T>] {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        self.iter().collect()
    }
}

/// Total number of trainable scalars.
pub fn count_parameters<T: Scalar, P: Parameterized<T> + ?Sized>(model: &P) -> usize {
    model.parameters().iter().map(|t| t.len()).sum()
}

/// Per-sample FLOP breakdown, one entry per layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub layers: Vec<(String, u64)>,
}

impl FlopCount {
    pub fn push(&mut self, name: impl Into<String>, flops: u64) {
        self.layers.push((name.into(), flops));
    }

    pub fn extend(&mut self, other: FlopCount) {
        self.layers.extend(other.layers);
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|(_, f)| f).sum()
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, f)| *f)
    }
}

/// `conv = 2·kh·kw·cin·cout·h'·w'` plus one op per activated output.
pub fn conv_stage_flops(g: &StageGeometry) -> (u64, u64) {
    let outputs = (g.out_height * g.out_width * g.out_channels) as u64;
    let conv = 2 * (g.kernel * g.kernel * g.in_channels) as u64 * outputs;
    (conv, outputs)
}

/// `dense = 2·m·k`
pub fn dense_flops(inputs: usize, outputs: usize) -> u64 {
    2 * (inputs * outputs) as u64
}

/// `(2c−1)·h·w`
pub fn blend_flops(height: usize, width: usize, channels: usize) -> u64 {
    ((2 * channels).saturating_sub(1) * height * width) as u64
}

/// The classifier backbone and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<(String, Tensor<T>)>,
}

fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound))).with_grad()
}

impl<T: Scalar> Network<T> {
    /// Builds a network with He-uniform weights and zero biases drawn from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        let geoms = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, (s, g)) in config.stages.iter().zip(&geoms).enumerate() {
            let fan_in = s.kernel * s.kernel * g.in_channels;
            params.push((
                format!("stage{}.kernel", i + 1),
                he_uniform(vec![s.kernel, s.kernel, g.in_channels, s.out_channels], fan_in, &mut rng),
            ));
            params.push((format!("stage{}.bias", i + 1), Tensor::zeros(vec![s.out_channels]).with_grad()));
        }
        let mut width = config.feature_width();
        if config.hidden_width > 0 {
            params.push(("hidden.weight".into(), he_uniform(vec![width, config.hidden_width], width, &mut rng)));
            params.push(("hidden.bias".into(), Tensor::zeros(vec![config.hidden_width]).with_grad()));
            width = config.hidden_width;
        }
        params.push(("head.weight".into(), he_uniform(vec![width, config.class_count], width, &mut rng)));
        params.push(("head.bias".into(), Tensor::zeros(vec![config.class_count]).with_grad()));
        Ok(Self { config, params })
    }

    /// Reassembles a network from named tensors, checking every shape.
    pub fn from_parameters(config: NetworkConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = Network::<T>::build(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "network expects {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((name, t), (want_name, want)) in params.iter().zip(&template.params) {
            if name != want_name || t.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} does not match expected {want_name} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
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

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn named_parameters(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    /// Registers every parameter as a leaf, in storage order.
    pub fn register(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        self.params.iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Records the forward pass. `params` must come from [`Network::register`].
    /// Feature maps after every stage are returned when `keep_features` is set.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        keep_features: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape(input).to_vec();
        let cfg = &self.config;
        let expected = [cfg.input_height, cfg.input_width, cfg.input_channels];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::dim(
                "forward",
                format!("input {shape:?} does not match configured [n, {}, {}, {}]", expected[0], expected[1], expected[2]),
            ));
        }
        let mut features = Vec::new();
        let mut x = input;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches config");
        for s in &cfg.stages {
            let (k, b) = (next(), next());
            x = tape.conv2d(x, k, b, ConvSpec { stride: s.stride, padding: s.padding() })?;
            x = tape.activation(x, s.activation)?;
            if keep_features {
                features.push(x);
            }
        }
        x = match cfg.pooling {
            Pooling::Average => tape.global_avg_pool(x)?,
            Pooling::Flatten => {
                let n = tape.shape(x)[0];
                tape.reshape(x, &[n, cfg.feature_width()])?
            }
        };
        if cfg.hidden_width > 0 {
            let (w, b) = (next(), next());
            x = tape.dense(x, w, b)?;
            x = tape.activation(x, cfg.head_activation)?;
        }
        let (w, b) = (next(), next());
        let logits = tape.dense(x, w, b)?;
        Ok((logits, features))
    }

    /// Logits for a `[n, h, w, input_channels]` batch.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with_features(input).map(|(logits, _)| logits)
    }

    /// Logits plus the activated feature map of every stage.
    pub fn forward_with_features(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let params = self.params.iter().map(|(_, t)| tape.constant(t)).collect::<Result<Vec<_>>>()?;
        let x = tape.constant(input)?;
        let (logits, feats) = self.forward_on(&mut tape, &params, x, true)?;
        Ok((tape.tensor(logits), feats.into_iter().map(|f| tape.tensor(f)).collect()))
    }

    /// Per-sample FLOPs for an input of `[h, w, c]`.
    pub fn estimate_flops(&self, input_shape: [usize; 3]) -> Result<FlopCount> {
        let cfg = NetworkConfig {
            input_height: input_shape[0],
            input_width: input_shape[1],
            input_channels: input_shape[2],
            ..self.config.clone()
        };
        if input_shape[2] != self.config.input_channels {
            return Err(Error::dim(
                "estimate_flops",
                format!("{} input channels, network expects {}", input_shape[2], self.config.input_channels),
            ));
        }
        let geoms = cfg.validate()?;
        let mut flops = FlopCount::default();
        for (i, g) in geoms.iter().enumerate() {
            let (conv, act) = conv_stage_flops(g);
            flops.push(format!("stage{}.conv", i + 1), conv);
            flops.push(format!("stage{}.activation", i + 1), act);
        }
        let (h, w, c) = geoms
            .last()
            .map_or((input_shape[0], input_shape[1], input_shape[2]), |g| (g.out_height, g.out_width, g.out_channels));
        let mut width = c;
        if cfg.pooling == Pooling::Average {
            flops.push("pool", (h * w * c) as u64);
        } else {
            width = h * w * c;
        }
        if cfg.hidden_width > 0 {
            flops.push("hidden.dense", dense_flops(width, cfg.hidden_width));
            flops.push("hidden.activation", cfg.hidden_width as u64);
            width = cfg.hidden_width;
        }
        flops.push("head.dense", dense_flops(width, cfg.class_count));
        Ok(flops)
    }
}

impl<T> Parameterized<T> for Network<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        self.params.iter().map(|(_, t)| t).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            stages: vec![
                StageConfig { out_channels: 3, kernel: 3, stride: 1, activation: Activation::Hardswish },
                StageConfig { out_channels: 4, kernel: 3, stride: 2, activation: Activation::Relu },
            ],
            hidden_width: 5,
            pooling: Pooling::Average,
            head_activation: Activation::Hardswish,
            class_count: 3,
            input_height: 6,
            input_width: 6,
            input_channels: 1,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::<f32>::build(NetworkConfig::default(), 42).unwrap();
        let b = Network::<f32>::build(NetworkConfig::default(), 42).unwrap();
        assert_eq!(a, b);
        let c = Network::<f32>::build(NetworkConfig::default(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_config_fits_budget() {
        let net = Network::<f32>::build(NetworkConfig::default(), 0).unwrap();
        let n = count_parameters(&net);
        assert!(n <= 300_000, "{n}");
        assert_eq!(n, net.config().parameter_count());
    }

    #[test]
    fn zero_stage_head_on_pooled_input() {
        let cfg = NetworkConfig {
            stages: vec![],
            hidden_width: 0,
            pooling: Pooling::Average,
            input_channels: 3,
            ..NetworkConfig::default()
        };
        let net = Network::<f64>::build(cfg, 1).unwrap();
        assert_eq!(count_parameters(&net), (3 + 1) * 10);
    }

    #[test]
    fn single_conv_count_by_hand() {
        let convs: Vec<Tensor<f32>> = vec![Tensor::zeros(vec![3, 3, 1, 8]), Tensor::zeros(vec![8])];
        assert_eq!(count_parameters(convs.as_slice()), 80);
        let empty: Vec<Tensor<f32>> = vec![];
        assert_eq!(count_parameters(empty.as_slice()), 0);
    }

    #[test]
    fn collapsing_config_is_rejected() {
        let cfg = NetworkConfig {
            stages: vec![StageConfig { out_channels: 4, kernel: 4, stride: 2, activation: Activation::Relu }; 3],
            input_height: 4,
            input_width: 4,
            ..NetworkConfig::default()
        };
        assert!(matches!(Network::<f32>::build(cfg, 0), Err(Error::Config(_))));
        let cfg = NetworkConfig { class_count: 1, ..NetworkConfig::default() };
        assert!(Network::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_batch_independence() {
        let net = Network::<f32>::build(NetworkConfig::default(), 3).unwrap();
        let one = Tensor::from_fn(vec![1, 28, 28, 1], |i| ((i * 37) % 255) as f32 / 255.0);
        let logits = net.forward(&one).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);

        let two = Tensor::from_fn(vec![2, 28, 28, 1], |i| one.data()[i % 784]);
        let logits2 = net.forward(&two).unwrap();
        assert_eq!(&logits2.data()[..10], &logits2.data()[10..]);
        assert_eq!(&logits2.data()[..10], logits.data());
    }

    #[test]
    fn forward_rejects_wrong_spatial_size() {
        let net = Network::<f32>::build(NetworkConfig::default(), 3).unwrap();
        assert!(net.forward(&Tensor::zeros(vec![1, 27, 28, 1])).is_err());
    }

    #[test]
    fn features_are_retained_per_stage() {
        let net = Network::<f32>::build(NetworkConfig::default(), 3).unwrap();
        let (_, feats) = net.forward_with_features(&Tensor::zeros(vec![2, 28, 28, 1])).unwrap();
        let shapes: Vec<_> = feats.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 28, 28, 8], vec![2, 14, 14, 16], vec![2, 7, 7, 32], vec![2, 4, 4, 64]]);
    }

    #[test]
    fn dense_flops_by_hand() {
        assert_eq!(dense_flops(8, 3), 48);
        assert_eq!(blend_flops(28, 28, 3), 3920);
    }

    #[test]
    fn flops_are_additive() {
        let net = Network::<f32>::build(NetworkConfig::default(), 0).unwrap();
        let f = net.estimate_flops([28, 28, 1]).unwrap();
        assert_eq!(f.get("stage1.conv"), Some(2 * 9 * 8 * 28 * 28));
        assert_eq!(f.get("stage4.conv"), Some(2 * 9 * 32 * 64 * 4 * 4));
        assert_eq!(f.get("pool"), None);
        assert_eq!(f.get("hidden.dense"), Some(2 * 4 * 4 * 64 * 64));
        assert_eq!(f.get("head.dense"), Some(2 * 64 * 10));
        let avg = NetworkConfig { pooling: Pooling::Average, ..NetworkConfig::default() };
        let g = Network::<f32>::build(avg, 0).unwrap().estimate_flops([28, 28, 1]).unwrap();
        assert_eq!(g.get("pool"), Some(4 * 4 * 64));
        assert_eq!(g.get("hidden.dense"), Some(2 * 64 * 64));
        let sum: u64 = f.layers.iter().map(|(_, v)| v).sum();
        assert_eq!(f.total(), sum);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = tiny();
        let text = toml::to_string(&cfg).unwrap();
        let back: NetworkConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn all_network_gradients_pass_check() {
        let net = Network::<f64>::build(tiny(), 9).unwrap();
        let input = Tensor::from_fn(vec![2, 6, 6, 1], |i| ((i * 7919) % 101) as f64 / 101.0);
        let labels = [2usize, 0];
        let mut inputs: Vec<Tensor<f64>> = net.named_parameters().iter().map(|(_, t)| t.clone()).collect();
        inputs.push(input);
        let errs = grad_check_many(
            |tape, vars| {
                let (params, x) = vars.split_at(vars.len() - 1);
                let (logits, _) = net.forward_on(tape, params, x[0], false)?;
                tape.softmax_cross_entropy(logits, &labels)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }
}
