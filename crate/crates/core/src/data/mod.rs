//! Dataset construction.
//!
//! Images are stored HWC per sample. Ingested 8-bit data keeps its raw
//! 0–255 values until [`normalize_01`] maps everything into `[0, 1]`.

mod container;
mod idx;
mod split;
mod synth;
mod transform;

pub use container::{decode_container, encode_container, read_container, write_container, CONTAINER_MAGIC};
pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use split::{split, split_indices, SplitSpec};
pub use synth::{synth_multispectral, SynthSpec};
pub use transform::{
    add_noise_channels, denormalize_01, extract_patches, normalize_01, percentile, percentile_normalize, subsample,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One `h × w × c` image, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl MultiChannelImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("an image needs at least one channel".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::dim(
                "image",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, pixels.len()),
            ));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// All values of one channel in row-major order.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.pixels.iter().skip(c).step_by(self.channels).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Validation,
    Holdout,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Holdout => "holdout",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SplitTag::Full),
            "train" => Ok(SplitTag::Train),
            "validation" => Ok(SplitTag::Validation),
            "holdout" => Ok(SplitTag::Holdout),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, validation or holdout)"
            ))),
        }
    }
}

/// Images with integer labels and, when known, the true channel ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<MultiChannelImage>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// 1-based channel indices, most important first.
    pub ground_truth_importance: Option<Vec<usize>>,
    /// 1-based indices of channels that carry no label information.
    pub noise_channels: Vec<usize>,
    pub split: SplitTag,
}

impl LabeledDataset {
    pub fn new(images: Vec<MultiChannelImage>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            class_count,
            ground_truth_importance: None,
            noise_channels: Vec::new(),
            split: SplitTag::Full,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} images but {} labels", self.images.len(), self.labels.len()),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::LabelOutOfRange { label: bad, classes: self.class_count });
        }
        if let Some(first) = self.images.first() {
            let shape = (first.height, first.width, first.channels);
            if let Some(i) = self.images.iter().position(|im| (im.height, im.width, im.channels) != shape) {
                return Err(Error::dim("dataset", format!("image {i} differs in shape from image 0")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(height, width, channels)` of every image.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.height, im.width, im.channels))
    }

    pub fn channel_count(&self) -> usize {
        self.image_shape().map_or(0, |s| s.2)
    }

    /// Gathers samples into a `[n, h, w, c]` tensor and their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let (h, w, c) = self.image_shape().ok_or(Error::EmptyDataset)?;
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.images[i].pixels.iter().map(|&v| T::from_f32(v).unwrap()));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), h, w, c], data)?, labels))
    }

    /// A new dataset with the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            ground_truth_importance: self.ground_truth_importance.clone(),
            noise_channels: self.noise_channels.clone(),
            split: self.split,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
