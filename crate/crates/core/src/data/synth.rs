use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, MultiChannelImage};
use crate::error::{Error, Result};
use crate::seeded_rng;

const TEMPLATE_STREAM: u64 = 4;
const SAMPLE_STREAM: u64 = 5;

/// Synthetic multispectral classification task with a known channel order.
///
/// Channels are laid out as signal, then redundant, then noise. Signal
/// channel `j` carries a class-specific Gaussian blob whose contrast decays
/// with `j`; redundant channel `r` copies signal channel `r mod signal`
/// blended with fresh noise; noise channels are uniform on `[0, 255]`.
/// Values are raw intensities on `[0, 255]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub samples: usize,
    pub signal_channels: usize,
    pub redundant_channels: usize,
    pub noise_channels: usize,
    /// Share of the source channel in a redundant channel.
    pub redundancy: f64,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            samples: 2000,
            signal_channels: 2,
            redundant_channels: 2,
            noise_channels: 2,
            redundancy: 0.5,
            size: 28,
            classes: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn channel_count(&self) -> usize {
        self.signal_channels + self.redundant_channels + self.noise_channels
    }
}

struct Blob {
    cy: f64,
    cx: f64,
}

pub fn synth_multispectral(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.signal_channels == 0 {
        return Err(Error::InvalidArgument("synthetic data needs at least one signal channel".into()));
    }
    if !(0.0..=1.0).contains(&spec.redundancy) {
        return Err(Error::InvalidArgument(format!("redundancy must lie in [0, 1], got {}", spec.redundancy)));
    }
    if spec.classes < 2 || spec.size < 4 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes and side 4".into()));
    }
    let (s, r, k) = (spec.signal_channels, spec.redundant_channels, spec.noise_channels);
    let c = s + r + k;
    let side = spec.size as f64;
    let sigma = side / 7.0;

    let mut trng = seeded_rng(spec.seed, TEMPLATE_STREAM);
    let margin = side * 0.25;
    let templates: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| {
            (0..s)
                .map(|_| Blob { cy: trng.gen_range(margin..side - margin), cx: trng.gen_range(margin..side - margin) })
                .collect()
        })
        .collect();
    let contrast: Vec<f64> = (0..s).map(|j| 150.0 * 0.7f64.powi(j as i32)).collect();

    let mut rng = seeded_rng(spec.seed, SAMPLE_STREAM);
    let mut images = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    let n_px = spec.size * spec.size;
    for _ in 0..spec.samples {
        let label = rng.gen_range(0..spec.classes);
        let mut planes = vec![vec![0f32; n_px]; c];
        for j in 0..s {
            let blob = &templates[label][j];
            let (jy, jx) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            for (p, v) in planes[j].iter_mut().enumerate() {
                let (y, x) = ((p / spec.size) as f64, (p % spec.size) as f64);
                let d2 = (y - blob.cy - jy).powi(2) + (x - blob.cx - jx).powi(2);
                let background: f64 = rng.gen_range(0.0..80.0);
                *v = (background + contrast[j] * (-d2 / (2.0 * sigma * sigma)).exp()).min(255.0) as f32;
            }
        }
        for q in 0..r {
            let src = q % s;
            for p in 0..n_px {
                let noise = f64::from(rng.gen_range(0..=255u8));
                let v = spec.redundancy * f64::from(planes[src][p]) + (1.0 - spec.redundancy) * noise;
                planes[s + q][p] = v as f32;
            }
        }
        for plane in &mut planes[s + r..] {
            plane.iter_mut().for_each(|v| *v = f32::from(rng.gen_range(0..=255u8)));
        }
        let mut px = Vec::with_capacity(n_px * c);
        for p in 0..n_px {
            px.extend(planes.iter().map(|plane| plane[p]));
        }
        images.push(MultiChannelImage::new(spec.size, spec.size, c, px)?);
        labels.push(label);
    }
    let mut ds = LabeledDataset::new(images, labels, spec.classes)?;
    ds.ground_truth_importance = Some((1..=c).collect());
    ds.noise_channels = (s + r + 1..=c).collect();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_redundancy_copies_the_source() {
        let spec = SynthSpec { samples: 5, redundancy: 1.0, ..SynthSpec::default() };
        let ds = synth_multispectral(&spec).unwrap();
        for im in &ds.images {
            assert_eq!(im.channel(2), im.channel(0));
            assert_eq!(im.channel(3), im.channel(1));
        }
        assert_eq!(ds.ground_truth_importance, Some(vec![1, 2, 3, 4, 5, 6]));
        assert_eq!(ds.noise_channels, vec![5, 6]);
    }

    #[test]
    fn values_are_raw_intensities() {
        let ds = synth_multispectral(&SynthSpec { samples: 20, ..SynthSpec::default() }).unwrap();
        assert!(ds.images.iter().all(|im| im.pixels().iter().all(|v| (0.0..=255.0).contains(v))));
        assert_eq!(ds.image_shape(), Some((28, 28, 6)));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec { samples: 30, seed: 8, ..SynthSpec::default() };
        assert_eq!(synth_multispectral(&spec).unwrap(), synth_multispectral(&spec).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_multispectral(&SynthSpec { signal_channels: 0, ..SynthSpec::default() }).is_err());
        assert!(synth_multispectral(&SynthSpec { redundancy: 1.5, ..SynthSpec::default() }).is_err());
    }
}
