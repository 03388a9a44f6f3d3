//! The channel-mixing layer.
//!
//! A `c`-channel image is collapsed into one plane as `Σ αᵢ·Aᵢ` with every
//! `αᵢ ≥ 0`. The weights are trained by projected gradient descent: the
//! optimizer takes an ordinary step and [`MixingWeights::project_nonnegative`]
//! clamps the result back onto the feasible set, so the raw weights can be
//! read directly as channel importances.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Learnable per-channel mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingWeights<T> {
    alphas: Tensor<T>,
}

impl<T: Scalar> MixingWeights<T> {
    /// Equal mixing, `αᵢ = 1/c`.
    pub fn new(channel_count: usize) -> Result<Self> {
        if channel_count == 0 {
            return Err(Error::InvalidArgument("mixing needs at least one channel".into()));
        }
        let init = T::one() / T::from_usize(channel_count).unwrap();
        Ok(Self {
            alphas: Tensor::full(vec![channel_count], init).with_grad(),
        })
    }

    /// Wraps explicit weights. Negative entries are rejected; use
    /// [`MixingWeights::from_raw`] for unprojected values.
    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::InvalidArgument("mixing weights must be finite and nonnegative".into()));
        }
        Self::from_raw(values)
    }

    /// Wraps weights without checking the sign constraint.
    pub fn from_raw(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("mixing needs at least one channel".into()));
        }
        let n = values.len();
        Ok(Self {
            alphas: Tensor::new(vec![n], values)?.with_grad(),
        })
    }

    pub fn channel_count(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &Tensor<T> {
        &self.alphas
    }

    pub fn alphas_mut(&mut self) -> &mut Tensor<T> {
        &mut self.alphas
    }

    pub fn values(&self) -> &[T] {
        self.alphas.data()
    }

    /// Trainable scalars contributed by the layer.
    pub fn parameter_count(&self) -> usize {
        self.alphas.len()
    }

    /// `αᵢ ← max(0, αᵢ)`
    pub fn project_nonnegative(&mut self) {
        for a in self.alphas.data_mut() {
            *a = a.max(T::zero());
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.values().iter().all(|&a| a >= T::zero())
    }

    /// 1-based channel indices ordered by weight, largest first; ties go to
    /// the lower index.
    pub fn importance_ranking(&self) -> Vec<usize> {
        let values: Vec<f64> = self.values().iter().map(|v| v.as_f64()).collect();
        rank_descending(&values)
    }

    /// Records the blend on `tape`; `alphas` must be the var returned by
    /// registering [`MixingWeights::alphas`].
    pub fn blend_on(&self, tape: &mut Tape<T>, image: Var, alphas: Var) -> Result<Var> {
        let c = tape.shape(image).last().copied().unwrap_or(0);
        if c != self.channel_count() {
            return Err(Error::dim(
                "blend",
                format!("image has {c} channels, mixing layer has {}", self.channel_count()),
            ));
        }
        tape.blend(image, alphas)
    }
}

/// 1-based indices sorted by value descending, ties broken by lower index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.into_iter().map(|i| i + 1).collect()
}

/// Forward-only blend: `[n,h,w,c] → [n,h,w,1]`.
pub fn blend<T: Scalar>(image: &Tensor<T>, weights: &MixingWeights<T>) -> Result<Tensor<T>> {
    if weights.values().iter().any(|&a| a < T::zero()) {
        return Err(Error::InvalidArgument("mixing weights must be nonnegative".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image)?;
    let a = tape.constant(weights.alphas())?;
    let out = weights.blend_on(&mut tape, x, a)?;
    Ok(tape.tensor(out))
}

/// Two-image alpha compositing, `C = α·A₁ + (1−α)·A₂`.
pub fn alpha_composite_two<T: Scalar>(a1: &Tensor<T>, a2: &Tensor<T>, alpha1: T) -> Result<Tensor<T>> {
    if a1.shape() != a2.shape() {
        return Err(Error::dim(
            "alpha_composite_two",
            format!("shapes {:?} and {:?} differ", a1.shape(), a2.shape()),
        ));
    }
    if !(alpha1 >= T::zero() && alpha1 <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha1:?}"
        )));
    }
    let beta = T::one() - alpha1;
    let data = a1.data().iter().zip(a2.data()).map(|(&x, &y)| alpha1 * x + beta * y).collect();
    Tensor::new(a1.shape().to_vec(), data)
}
