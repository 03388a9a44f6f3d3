//! On-disk dataset cache.
//!
//! All integers are little-endian u32.
//!
//! ```text
//! "DCMX1"                      magic
//! side, channels, count        header (images are side × side)
//! count·side·side·channels     f32 pixels, sample-major, HWC within a sample
//! class_count, count labels    label block
//! n, n ranks                   ground-truth importance (n = 0 if unknown)
//! m, m indices                 noise channels
//! split                        u32 tag: 0 full, 1 train, 2 validation, 3 holdout
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{LabeledDataset, MultiChannelImage, SplitTag};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 5] = b"DCMX1";

fn split_code(tag: SplitTag) -> u32 {
    match tag {
        SplitTag::Full => 0,
        SplitTag::Train => 1,
        SplitTag::Validation => 2,
        SplitTag::Holdout => 3,
    }
}

pub fn encode_container(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let (h, w, c) = ds.image_shape().unwrap_or((0, 0, 0));
    if h != w {
        return Err(Error::InvalidArgument(format!("the container stores square images only, got {h}x{w}")));
    }
    let mut out = Vec::with_capacity(32 + ds.len() * (h * w * c * 4 + 4));
    let push = |out: &mut Vec<u8>, v: usize| -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    };
    out.extend_from_slice(CONTAINER_MAGIC);
    for v in [h, c, ds.len()] {
        push(&mut out, v)?;
    }
    for im in &ds.images {
        for v in im.pixels() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    push(&mut out, ds.class_count)?;
    for &l in &ds.labels {
        push(&mut out, l)?;
    }
    let truth = ds.ground_truth_importance.as_deref().unwrap_or(&[]);
    for list in [truth, &ds.noise_channels[..]] {
        push(&mut out, list.len())?;
        for &v in list {
            push(&mut out, v)?;
        }
    }
    push(&mut out, split_code(ds.split) as usize)?;
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("dataset container truncated while reading {what} at byte {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn list(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.u32(what)?;
        (0..n).map(|_| self.u32(what)).collect()
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(5, "magic")? != CONTAINER_MAGIC {
        return Err(Error::Format(format!(
            "not a dataset container: expected magic {:?}",
            std::str::from_utf8(CONTAINER_MAGIC).unwrap()
        )));
    }
    let side = cur.u32("header")?;
    let channels = cur.u32("header")?;
    let count = cur.u32("header")?;
    let per = side
        .checked_mul(side)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Corrupt("dataset container header overflows".into()))?;
    let mut images = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let raw = cur.take(per * 4, &format!("pixels of sample {i}"))?;
        let px = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        images.push(MultiChannelImage::new(side, side, channels, px)?);
    }
    let class_count = cur.u32("label block")?;
    let labels = (0..count).map(|_| cur.u32("label block")).collect::<Result<Vec<_>>>()?;
    let truth = cur.list("ground-truth importance")?;
    let noise = cur.list("noise channels")?;
    let split = match cur.u32("split tag")? {
        0 => SplitTag::Full,
        1 => SplitTag::Train,
        2 => SplitTag::Validation,
        3 => SplitTag::Holdout,
        t => return Err(Error::Corrupt(format!("unknown split tag {t} in dataset container"))),
    };
    if cur.at != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after dataset container", bytes.len() - cur.at)));
    }
    let ds = LabeledDataset {
        images,
        labels,
        class_count,
        ground_truth_importance: (!truth.is_empty()).then_some(truth),
        noise_channels: noise,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_container(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let bytes = encode_container(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_multispectral, SynthSpec};

    #[test]
    fn round_trip_is_lossless_and_stable() {
        let mut ds = synth_multispectral(&SynthSpec { samples: 7, size: 8, ..SynthSpec::default() }).unwrap();
        ds.split = SplitTag::Validation;
        let bytes = encode_container(&ds).unwrap();
        assert_eq!(&bytes[..5], b"DCMX1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 8);
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_container(&back).unwrap(), bytes);
    }

    #[test]
    fn damaged_containers_are_rejected() {
        let ds = synth_multispectral(&SynthSpec { samples: 3, size: 8, ..SynthSpec::default() }).unwrap();
        let bytes = encode_container(&ds).unwrap();
        assert!(matches!(decode_container(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(decode_container(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = synth_multispectral(&SynthSpec { samples: 2, size: 6, ..SynthSpec::default() }).unwrap();
        write_container(&path, &ds).unwrap();
        assert_eq!(read_container(&path).unwrap(), ds);
    }
}
