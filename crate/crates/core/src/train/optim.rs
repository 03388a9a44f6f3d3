use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First-order optimizer over a fixed, ordered list of parameter tensors.
pub struct Optimizer<T> {
    settings: OptimizerSettings,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(settings: OptimizerSettings) -> Self {
        Self { settings, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// One update of every `params[i]` against `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let s = self.settings;
        let lr = T::from_f64_lossy(s.learning_rate);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            match s.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in data.iter_mut().zip(g.iter()) {
                        *w = *w - lr * gi;
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let mu = T::from_f64_lossy(s.momentum);
                    for ((w, &gi), v) in data.iter_mut().zip(g.iter()).zip(&mut self.first[i]) {
                        *v = mu * *v + gi;
                        *w = *w - lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::from_f64_lossy(s.beta1), T::from_f64_lossy(s.beta2));
                    let c1 = T::from_f64_lossy(1.0 - s.beta1.powi(self.step));
                    let c2 = T::from_f64_lossy(1.0 - s.beta2.powi(self.step));
                    let eps = T::from_f64_lossy(s.epsilon);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (w, &gi)) in data.iter_mut().zip(g.iter()).enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * gi;
                        v[j] = b2 * v[j] + (T::one() - b2) * gi * gi;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w = *w - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(kind: OptimizerKind, lr: f64) -> OptimizerSettings {
        OptimizerSettings { kind, learning_rate: lr, momentum: 0.9, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let mut p = Tensor::<f64>::new(vec![3], vec![0.5, -2.0, 7.25]).unwrap();
            let before = p.clone();
            let mut opt = Optimizer::new(settings(kind, 0.0));
            opt.step(&mut [&mut p], &[&[1.0, -3.0, 1e6]]);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn hand_computed_steps() {
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        Optimizer::new(settings(OptimizerKind::Sgd, 0.1)).step(&mut [&mut p], &[&[2.0]]);
        assert!((p.data()[0] - 0.8).abs() < 1e-15);

        // first Adam step moves every coordinate by ≈ lr·sign(g)
        let mut q = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap();
        Optimizer::new(settings(OptimizerKind::Adam, 0.01)).step(&mut [&mut q], &[&[5.0, -0.1]]);
        assert!((q.data()[0] + 0.01).abs() < 1e-8);
        assert!((q.data()[1] - 0.01).abs() < 1e-6);

        let mut r = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let mut opt = Optimizer::new(settings(OptimizerKind::SgdMomentum, 1.0));
        opt.step(&mut [&mut r], &[&[1.0]]);
        opt.step(&mut [&mut r], &[&[1.0]]);
        assert!((r.data()[0] + 2.9).abs() < 1e-12);
    }
}
