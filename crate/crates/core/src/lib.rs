//! Learned channel mixing for interpretable multi-channel image classification.
//!
//! A multi-channel image is collapsed into a single plane by a nonnegative
//! weighted sum of its channels before it reaches a compact CNN classifier.
//! The mixing weights are trained jointly with the classifier, and their
//! magnitudes rank the input channels by importance.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: NHWC tensors and a reverse-mode tape with the handful of ops
//!   the classifiers need, plus finite-difference gradient checking.
//! - [`mixing`]: the channel-mixing layer and its importance ranking.
//! - [`network`]: the configurable CNN backbone with parameter and FLOP
//!   accounting.
//! - [`attention`]: a softmax channel-attention baseline.
//! - [`model`]: the three model kinds (plain, mixing, attention) behind one type.
//! - [`data`]: IDX parsing, noise-channel injection, normalization, splits,
//!   and a synthetic multispectral generator.
//! - [`train`]: optimizers, the training loop, metrics, rank correlation and
//!   checkpoints.
//! - [`config`], [`report`], [`commands`]: the run configuration file, JSON
//!   reports, and the command implementations behind the `dcmix` binary.

pub mod attention;
pub mod commands;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod mixing;
pub mod model;
pub mod network;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Independent deterministic stream `stream` of the generator seeded by `seed`.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
