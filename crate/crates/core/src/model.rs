//! The three classifier variants behind one type.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionHead};
use crate::error::{Error, Result};
use crate::mixing::MixingWeights;
use crate::network::{blend_flops, FlopCount, Network, NetworkConfig, Parameterized};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// The backbone applied to all channels directly.
    Plain,
    /// Learned nonnegative channel mixing in front of a single-plane backbone.
    Dcmix,
    /// Softmax channel attention in front of a single-plane backbone.
    Attention,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Plain => "plain",
            ModelKind::Dcmix => "dcmix",
            ModelKind::Attention => "attention",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ModelKind::Plain),
            "dcmix" => Ok(ModelKind::Dcmix),
            "attention" => Ok(ModelKind::Attention),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    Plain { network: Network<T> },
    Dcmix { mixing: MixingWeights<T>, network: Network<T> },
    Attention { head: AttentionHead<T>, network: Network<T> },
}

/// Vars recorded by [`Model::forward_on`].
pub struct ForwardPass {
    pub logits: Var,
    /// Every trainable tensor, in [`Model::trainables_mut`] order.
    pub params: Vec<Var>,
    /// `[n, c]` attention weights, for the attention model.
    pub channel_weights: Option<Var>,
}

impl<T: Scalar> Model<T> {
    /// Builds `kind` for `channels`-channel input. The backbone's
    /// `input_channels` is set to `channels` for the plain model and to 1
    /// otherwise.
    pub fn build(kind: ModelKind, backbone: &NetworkConfig, channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        let mut cfg = backbone.clone();
        Ok(match kind {
            ModelKind::Plain => {
                cfg.input_channels = channels;
                Model::Plain { network: Network::build(cfg, seed)? }
            }
            ModelKind::Dcmix => {
                cfg.input_channels = 1;
                Model::Dcmix {
                    mixing: MixingWeights::new(channels)?,
                    network: Network::build(cfg, seed)?,
                }
            }
            ModelKind::Attention => {
                cfg.input_channels = 1;
                let head_cfg = AttentionConfig::new(channels, cfg.input_height, cfg.input_width);
                Model::Attention {
                    head: AttentionHead::build(head_cfg, seed ^ 0x5eed_a77e)?,
                    network: Network::build(cfg, seed)?,
                }
            }
        })
    }

    /// Every parameter under a stable, front-end-qualified name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            Model::Plain { .. } => {}
            Model::Dcmix { mixing, .. } => out.push(("mixing.alphas".to_string(), mixing.alphas())),
            Model::Attention { head, .. } => {
                out.extend(head.named_parameters().iter().map(|(n, t)| (format!("attention.{n}"), t)));
            }
        }
        out.extend(self.network().named_parameters().iter().map(|(n, t)| (format!("network.{n}"), t)));
        out
    }

    /// Inverse of [`Model::named_tensors`]. `network` is the backbone
    /// configuration as stored in the model, including its input channels.
    pub fn from_named(
        kind: ModelKind,
        network: NetworkConfig,
        channels: usize,
        tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        let mut front = Vec::new();
        let mut back = Vec::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("network.") {
                back.push((n.to_string(), t));
            } else {
                front.push((name, t));
            }
        }
        let (h, w) = (network.input_height, network.input_width);
        let net = Network::from_parameters(network, back)?;
        match kind {
            ModelKind::Plain if front.is_empty() => Ok(Model::Plain { network: net }),
            ModelKind::Dcmix if front.len() == 1 && front[0].0 == "mixing.alphas" => {
                let alphas = front.pop().unwrap().1;
                if alphas.len() != channels {
                    return Err(Error::Format(format!("{} mixing weights for {channels} channels", alphas.len())));
                }
                Ok(Model::Dcmix { mixing: MixingWeights::from_raw(alphas.into_data())?, network: net })
            }
            ModelKind::Attention => {
                let params = front
                    .into_iter()
                    .map(|(n, t)| match n.strip_prefix("attention.") {
                        Some(rest) => Ok((rest.to_string(), t)),
                        None => Err(Error::Format(format!("unexpected tensor {n} in attention model"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let head = AttentionHead::from_parameters(AttentionConfig::new(channels, h, w), params)?;
                Ok(Model::Attention { head, network: net })
            }
            _ => Err(Error::Format(format!("tensors do not describe a {} model", kind.name()))),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Plain { .. } => ModelKind::Plain,
            Model::Dcmix { .. } => ModelKind::Dcmix,
            Model::Attention { .. } => ModelKind::Attention,
        }
    }

    pub fn network(&self) -> &Network<T> {
        match self {
            Model::Plain { network } | Model::Dcmix { network, .. } | Model::Attention { network, .. } => network,
        }
    }

    pub fn mixing(&self) -> Option<&MixingWeights<T>> {
        match self {
            Model::Dcmix { mixing, .. } => Some(mixing),
            _ => None,
        }
    }

    pub fn attention(&self) -> Option<&AttentionHead<T>> {
        match self {
            Model::Attention { head, .. } => Some(head),
            _ => None,
        }
    }

    pub fn channel_count(&self) -> usize {
        match self {
            Model::Plain { network } => network.config().input_channels,
            Model::Dcmix { mixing, .. } => mixing.channel_count(),
            Model::Attention { head, .. } => head.channel_count(),
        }
    }

    /// Input `[h, w, c]` expected per sample.
    pub fn input_shape(&self) -> [usize; 3] {
        let cfg = self.network().config();
        [cfg.input_height, cfg.input_width, self.channel_count()]
    }

    /// Every trainable tensor: front-end parameters first, then the backbone.
    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Model::Plain { network } => network.parameters_mut().collect(),
            Model::Dcmix { mixing, network } => {
                std::iter::once(mixing.alphas_mut()).chain(network.parameters_mut()).collect()
            }
            Model::Attention { head, network } => head.parameters_mut().chain(network.parameters_mut()).collect(),
        }
    }

    /// Applies the mixing-weight constraint after an optimizer step.
    pub fn project(&mut self) {
        if let Model::Dcmix { mixing, .. } = self {
            mixing.project_nonnegative();
        }
    }

    /// Records the full forward pass for a `[n, h, w, c]` image batch.
    pub fn forward_on(&self, tape: &mut Tape<T>, image: Var) -> Result<ForwardPass> {
        let shape = tape.shape(image).to_vec();
        let [h, w, c] = self.input_shape();
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::dim("model", format!("input {shape:?} does not match [n, {h}, {w}, {c}]")));
        }
        match self {
            Model::Plain { network } => {
                let params = network.register(tape)?;
                let (logits, _) = network.forward_on(tape, &params, image, false)?;
                Ok(ForwardPass { logits, params, channel_weights: None })
            }
            Model::Dcmix { mixing, network } => {
                let alphas = tape.leaf(mixing.alphas())?;
                let blended = mixing.blend_on(tape, image, alphas)?;
                let net_params = network.register(tape)?;
                let (logits, _) = network.forward_on(tape, &net_params, blended, false)?;
                let mut params = vec![alphas];
                params.extend(net_params);
                Ok(ForwardPass { logits, params, channel_weights: None })
            }
            Model::Attention { head, network } => {
                let mut params = head.register(tape)?;
                let weights = head.weights_on(tape, &params, image)?;
                let blended = tape.weighted_blend(image, weights)?;
                let net_params = network.register(tape)?;
                let (logits, _) = network.forward_on(tape, &net_params, blended, false)?;
                params.extend(net_params);
                Ok(ForwardPass { logits, params, channel_weights: Some(weights) })
            }
        }
    }

    /// Inference: logits and, for the attention model, per-sample weights.
    pub fn predict(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let x = tape.constant(image)?;
        let pass = self.forward_on(&mut tape, x)?;
        let weights = pass.channel_weights.map(|w| tape.tensor(w));
        Ok((tape.tensor(pass.logits), weights))
    }

    /// Per-sample FLOPs for the configured input.
    pub fn estimate_flops(&self) -> Result<FlopCount> {
        let [h, w, c] = self.input_shape();
        match self {
            Model::Plain { network } => network.estimate_flops([h, w, c]),
            Model::Dcmix { network, .. } => {
                let mut flops = FlopCount::default();
                flops.push("blend", blend_flops(h, w, c));
                flops.extend(network.estimate_flops([h, w, 1])?);
                Ok(flops)
            }
            Model::Attention { head, network } => {
                let mut flops = head.estimate_flops()?;
                flops.extend(network.estimate_flops([h, w, 1])?);
                Ok(flops)
            }
        }
    }
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        match self {
            Model::Plain { network } => network.parameters(),
            Model::Dcmix { mixing, network } => {
                let mut p = vec![mixing.alphas()];
                p.extend(network.parameters());
                p
            }
            Model::Attention { head, network } => {
                let mut p = head.parameters();
                p.extend(network.parameters());
                p
            }
        }
    }
}
