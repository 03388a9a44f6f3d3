//! Checkpoint container.
//!
//! Little-endian throughout; every section carries a SHA-256 digest.
//!
//! ```text
//! "DCMXCKPT"                          magic
//! u32 version
//! u32 len, len bytes, 32-byte digest  metadata (JSON)
//! u32 record count
//! per record:
//!   u32 name len, name
//!   u8 dtype (0 = f32, 1 = f64), u32 rank, rank × u32 dims
//!   values
//!   32-byte digest of the record bytes above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, TrainConfig, TrainResult};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::network::NetworkConfig;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"DCMXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelKind,
    precision: String,
    channel_count: usize,
    network: NetworkConfig,
    train: TrainConfig,
    history: Vec<EpochRecord>,
    alpha_trajectory: Vec<Vec<f64>>,
    stopped_early: bool,
    run_config: serde_json::Value,
}

/// A training result together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub result: TrainResult<T>,
    /// Resolved run configuration, echoed verbatim.
    pub run_config: serde_json::Value,
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(result: &TrainResult<T>, run_config: &serde_json::Value) -> Result<Vec<u8>> {
    let model = &result.model;
    let meta = Meta {
        model: model.kind(),
        precision: T::NAME.to_string(),
        channel_count: model.channel_count(),
        network: model.network().config().clone(),
        train: result.config.clone(),
        history: result.history.clone(),
        alpha_trajectory: result.alpha_trajectory.clone(),
        stopped_early: result.stopped_early,
        run_config: run_config.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_u32(&mut out, meta_bytes.len())?;
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&digest(&meta_bytes));
    let tensors = model.named_tensors();
    push_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
        let mut rec = Vec::new();
        push_u32(&mut rec, name.len())?;
        rec.extend_from_slice(name.as_bytes());
        rec.push(T::DTYPE);
        push_u32(&mut rec, t.shape().len())?;
        for &d in t.shape() {
            push_u32(&mut rec, d)?;
        }
        for &v in t.data() {
            v.write_le(&mut rec);
        }
        let d = digest(&rec);
        out.extend_from_slice(&rec);
        out.extend_from_slice(&d);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("checkpoint truncated in {what} at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn check_digest(&mut self, start: usize, what: &str) -> Result<()> {
        let body = &self.bytes[start..self.at];
        if self.take(32, what)? != digest(body) {
            return Err(Error::Corrupt(format!("checksum mismatch in {what}")));
        }
        Ok(())
    }
}

fn read_meta(r: &mut Reader<'_>) -> Result<Meta> {
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = r.u32("metadata")?;
    let start = r.at;
    let meta_bytes = r.take(len, "metadata")?;
    r.check_digest(start, "metadata")?;
    serde_json::from_slice(meta_bytes).map_err(|e| Error::Corrupt(format!("metadata: {e}")))
}

/// Element type (`"f32"` or `"f64"`) of the stored parameters.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<String> {
    Ok(read_meta(&mut Reader { bytes, at: 0 })?.precision)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, at: 0 };
    let meta = read_meta(&mut r)?;
    if meta.precision != T::NAME {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, requested {}",
            meta.precision,
            T::NAME
        )));
    }
    let count = r.u32("record count")?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let what = format!("record {i}");
        let start = r.at;
        let name_len = r.u32(&what)?;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| Error::Corrupt(format!("{what}: name is not UTF-8")))?
            .to_string();
        let dtype = r.take(1, &what)?[0];
        let rank = r.u32(&what)?;
        let shape = (0..rank).map(|_| r.u32(&what)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let width = std::mem::size_of::<T>();
        if dtype != T::DTYPE {
            return Err(Error::Corrupt(format!("{what}: dtype {dtype} does not match {}", T::NAME)));
        }
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Corrupt(format!("{what}: size overflow")))?, &what)?;
        let values: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
        r.check_digest(start, &what)?;
        tensors.push((name, Tensor::new(shape, values)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
    }
    let model = Model::from_named(meta.model, meta.network, meta.channel_count, tensors)?;
    Ok(Checkpoint {
        result: TrainResult {
            model,
            config: meta.train,
            history: meta.history,
            alpha_trajectory: meta.alpha_trajectory,
            stopped_early: meta.stopped_early,
            wall_clock_seconds: None,
        },
        run_config: meta.run_config,
    })
}

pub fn save_checkpoint<T: Scalar>(result: &TrainResult<T>, run_config: &serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(result, run_config)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
