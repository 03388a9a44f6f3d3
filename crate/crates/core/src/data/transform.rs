use rand::seq::SliceRandom;
use rand::Rng;

use super::{LabeledDataset, MultiChannelImage};
use crate::error::{Error, Result};
use crate::seeded_rng;

const SUBSAMPLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Uniform draw of `n` samples without replacement.
pub fn subsample(dataset: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} samples from a dataset of {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seeded_rng(seed, SUBSAMPLE_STREAM));
    order.truncate(n);
    Ok(dataset.select(&order))
}

/// Appends `k` channels of i.i.d. uniform integer noise on `[0, 255]`, drawn
/// independently for every image. Existing channels keep their indices.
pub fn add_noise_channels(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<LabeledDataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("noise channel count must be at least 1".into()));
    }
    let (h, w, c) = dataset.image_shape().ok_or(Error::EmptyDataset)?;
    let mut rng = seeded_rng(seed, NOISE_STREAM);
    let images = dataset
        .images
        .iter()
        .map(|im| {
            let mut px = Vec::with_capacity(h * w * (c + k));
            for p in im.pixels().chunks_exact(c) {
                px.extend_from_slice(p);
                px.extend((0..k).map(|_| f32::from(rng.gen_range(0..=255u8))));
            }
            MultiChannelImage::new(h, w, c + k, px)
        })
        .collect::<Result<Vec<_>>>()?;
    let added: Vec<usize> = (c + 1..=c + k).collect();
    let mut truth = dataset.ground_truth_importance.clone().unwrap_or_else(|| (1..=c).collect());
    truth.extend(&added);
    let mut noise = dataset.noise_channels.clone();
    noise.extend(&added);
    Ok(LabeledDataset {
        images,
        labels: dataset.labels.clone(),
        class_count: dataset.class_count,
        ground_truth_importance: Some(truth),
        noise_channels: noise,
        split: dataset.split,
    })
}

fn map_pixels(dataset: &LabeledDataset, f: impl Fn(f32) -> f32) -> LabeledDataset {
    let mut out = dataset.clone();
    for im in &mut out.images {
        im.pixels_mut().iter_mut().for_each(|v| *v = f(*v));
    }
    out
}

/// Maps raw 8-bit intensities into `[0, 1]`, every channel alike.
pub fn normalize_01(dataset: &LabeledDataset) -> LabeledDataset {
    map_pixels(dataset, |v| v / 255.0)
}

pub fn denormalize_01(dataset: &LabeledDataset) -> LabeledDataset {
    map_pixels(dataset, |v| v * 255.0)
}

/// Percentile of already-sorted values with linear interpolation between
/// order statistics.
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Per-channel `clip((v − P_low)/(P_high − P_low), 0, 1)`. A channel whose
/// percentiles coincide maps to 0.5 everywhere.
pub fn percentile_normalize(image: &MultiChannelImage, p_low: f64, p_high: f64) -> Result<MultiChannelImage> {
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low >= p_high {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= low < high <= 100, got {p_low} and {p_high}"
        )));
    }
    if image.pixels().is_empty() {
        return Ok(image.clone());
    }
    let c = image.channels();
    let mut out = image.clone();
    for ch in 0..c {
        let mut values = image.channel(ch);
        values.sort_by(f32::total_cmp);
        let lo = percentile(&values, p_low);
        let hi = percentile(&values, p_high);
        for v in out.pixels_mut().iter_mut().skip(ch).step_by(c) {
            *v = if hi == lo {
                0.5
            } else {
                ((*v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) as f32
            };
        }
    }
    Ok(out)
}

/// Square patches of side `size` on a grid with step `offset`, row by row;
/// only patches that fit entirely inside the image are kept.
pub fn extract_patches(image: &MultiChannelImage, size: usize, offset: usize) -> Result<Vec<MultiChannelImage>> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if size == 0 || offset == 0 {
        return Err(Error::InvalidArgument("patch size and offset must be positive".into()));
    }
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} exceeds image dimensions {h}x{w}"
        )));
    }
    let mut patches = Vec::new();
    for top in (0..=h - size).step_by(offset) {
        for left in (0..=w - size).step_by(offset) {
            let mut px = Vec::with_capacity(size * size * c);
            for y in top..top + size {
                let start = (y * w + left) * c;
                px.extend_from_slice(&image.pixels()[start..start + size * c]);
            }
            patches.push(MultiChannelImage::new(size, size, c, px)?);
        }
    }
    Ok(patches)
}
