use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Direct loop convolution, independent of the im2col path.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![n, oh, ow, cout]);
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..cin {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at(&[s, iy as usize, ix as usize, ci]) * k.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out.data_mut()[((s * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

fn run_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> crate::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.constant(x)?, tape.constant(k)?, tape.constant(b)?);
    let out = tape.conv2d(xv, kv, bv, spec)?;
    Ok(tape.tensor(out))
}

#[test]
fn conv_scalar_kernel_scales() {
    let x = Tensor::full(vec![1, 3, 3, 1], 1.0);
    let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
    let b = Tensor::zeros(vec![1]);
    let out = run_conv(&x, &k, &b, ConvSpec::default()).unwrap();
    assert_eq!(out.shape(), &[1, 3, 3, 1]);
    assert!(out.data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_full_window_sum() {
    let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let k = Tensor::full(vec![2, 2, 1, 1], 1.0);
    let out = run_conv(&x, &k, &Tensor::zeros(vec![1]), ConvSpec::default()).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[10.0]);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let x = random(&[1, 5, 5, 2], &mut rng);
        let k = random(&[3, 3, 2, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let got = run_conv(&x, &k, &b, ConvSpec { stride, padding: pad }).unwrap();
        let want = conv_oracle(&x, &k, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (a, e) in got.data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_rejects_mismatched_channels() {
    let x = Tensor::<f64>::zeros(vec![1, 4, 4, 3]);
    let k = Tensor::zeros(vec![3, 3, 2, 4]);
    let err = run_conv(&x, &k, &Tensor::zeros(vec![4]), ConvSpec::default()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("axis 2") && msg.contains("axis 3"), "{msg}");
}

#[test]
fn conv_rejects_oversized_kernel() {
    let x = Tensor::<f64>::zeros(vec![1, 2, 2, 1]);
    let k = Tensor::zeros(vec![3, 3, 1, 1]);
    assert!(run_conv(&x, &k, &Tensor::zeros(vec![1]), ConvSpec::default()).is_err());
    assert!(run_conv(&x, &k, &Tensor::zeros(vec![1]), ConvSpec { stride: 1, padding: 1 }).is_ok());
}

fn run_dense(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> crate::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x)?, tape.constant(w)?, tape.constant(b)?);
    let out = tape.dense(xv, wv, bv)?;
    Ok(tape.tensor(out))
}

#[test]
fn dense_identity_and_hand_sum() {
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
    let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(run_dense(&x, &eye, &Tensor::zeros(vec![3])).unwrap().data(), x.data());

    let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let b = Tensor::new(vec![1], vec![3.0]).unwrap();
    assert_eq!(run_dense(&x, &w, &b).unwrap().data(), &[6.0]);
}

#[test]
fn dense_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[4, 8], &mut rng);
    let w = random(&[8, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let got = run_dense(&x, &w, &b).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = b.data()[j];
            for p in 0..8 {
                acc += x.at(&[i, p]) * w.at(&[p, j]);
            }
            assert!((got.at(&[i, j]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn dense_rejects_inner_mismatch() {
    let err = run_dense(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![4, 2]), &Tensor::zeros(vec![2])).unwrap_err();
    assert!(matches!(err, Error::Dimension { op: "dense", .. }));
}

#[test]
fn activation_values() {
    for (x, want) in [(-1.0, 0.0), (0.0, 0.0), (2.0, 2.0)] {
        assert_eq!(Activation::Relu.apply(x), want);
    }
    assert_eq!(Activation::Hardswish.apply(0.0f64), 0.0);
    assert_eq!(Activation::Hardswish.apply(3.0f64), 3.0);
    assert_eq!(Activation::Hardswish.apply(-4.0f64), 0.0);
    assert_eq!(Activation::Relu.derivative(0.0f64), 0.0);
}

#[test]
fn hardswish_gradient_matches_finite_difference() {
    let numeric = central_difference(|x: &[f64]| Activation::Hardswish.apply(x[0]), &[1.5], 1e-6)[0];
    let x = Tensor::new(vec![1], vec![1.5]).unwrap();
    let err = grad_check(
        |tape, v| {
            let y = tape.activation(v, Activation::Hardswish)?;
            tape.sum(y)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!((Activation::Hardswish.derivative(1.5f64) - numeric).abs() < 1e-6);
    assert!(err < 1e-6);
}

#[test]
fn global_avg_pool_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::full(vec![2, 3, 3, 2], 0.7)).unwrap();
    let p = tape.global_avg_pool(x).unwrap();
    assert!(tape.value(p).iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let x = tape.constant(&Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let p = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(p), &[2.5]);
}

#[test]
fn global_avg_pool_matches_mean_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random(&[3, 4, 5, 2], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(&t).unwrap();
    let p = tape.global_avg_pool(x).unwrap();
    for s in 0..3 {
        for c in 0..2 {
            let mut acc = 0.0;
            for y in 0..4 {
                for x in 0..5 {
                    acc += t.at(&[s, y, x, c]);
                }
            }
            assert_eq!(tape.value(p)[s * 2 + c], acc / 20.0);
        }
    }
}

fn ce_value(logits: &Tensor<f64>, labels: &[usize]) -> crate::Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits)?;
    let loss = tape.softmax_cross_entropy(l, labels)?;
    Ok(tape.value(loss)[0])
}

#[test]
fn cross_entropy_uniform_is_ln_k() {
    let loss = ce_value(&Tensor::zeros(vec![3, 10]), &[0, 4, 9]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_is_stabilized() {
    let loss = ce_value(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap(), &[0]).unwrap();
    assert!(loss.is_finite() && loss.abs() < 1e-12);
    let mut tape = Tape::<f32>::new();
    let l = tape.constant(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
    let loss = tape.softmax_cross_entropy(l, &[1]).unwrap();
    assert!((tape.value(loss)[0] - 1000.0).abs() < 1e-3);
}

#[test]
fn cross_entropy_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&[3, 5], &mut rng);
    let labels = [1usize, 4, 0];
    let err = grad_check(|tape, v| tape.softmax_cross_entropy(v, &labels), &logits, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let err = ce_value(&Tensor::zeros(vec![2, 3]), &[0, 3]).unwrap_err();
    assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3 }));
}

#[test]
fn backward_square() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1], vec![3.0f64]).unwrap().with_grad()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_accumulates_fan_out() {
    // loss = sum(a·b) + sum(a·c): d/da = b + c
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap().with_grad()).unwrap();
    let b = tape.constant(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
    let c = tape.constant(&Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap()).unwrap();
    let ab = tape.mul(a, b).unwrap();
    let ac = tape.mul(a, c).unwrap();
    let (s1, s2) = (tape.sum(ab).unwrap(), tape.sum(ac).unwrap());
    let loss = tape.add(s1, s2).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[2.0, 4.5]);
    assert!(tape.grad(b).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::<f64>::zeros(vec![2]).with_grad()).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_fills_only_requires_grad_leaves() {
    let mut tape = Tape::new();
    let w = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap().with_grad()).unwrap();
    let x = tape.leaf(&Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap()).unwrap();
    let unused = tape.leaf(&Tensor::<f64>::zeros(vec![3]).with_grad()).unwrap();
    let y = tape.matmul(x, w).unwrap();
    let h = tape.activation(y, Activation::Relu).unwrap();
    let loss = tape.sum(h).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(w).is_some());
    assert!(tape.grad(x).is_none());
    assert!(tape.grad(y).is_none() && tape.grad(h).is_none());
    assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
}

#[test]
fn grad_check_exact_cases() {
    let x = Tensor::new(vec![3], vec![0.3, -2.0, 5.0]).unwrap();
    let err = grad_check(|tape, v| tape.sum(v), &x, 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");

    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let err = grad_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0u32);
    let x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
    let err = grad_check(
        |tape, v| {
            calls.set(calls.get() + 1);
            let s = tape.sum(v)?;
            tape.scale(s, calls.get() as f64)
        },
        &x,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonDeterministic { .. }));
}

#[test]
fn grad_check_flags_wrong_derivative() {
    let x = Tensor::new(vec![3], vec![0.4, 1.1, -0.7]).unwrap();
    let err = grad_check(
        |tape, v| {
            let y = tape.map(v, |t: f64| t * t, |t| 3.0 * t)?;
            tape.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err > 0.1, "{err}");
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::new(vec![1], vec![-1.0]).unwrap()).unwrap();
    let err = tape.map(x, f64::ln, |t| 1.0 / t).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

#[test]
fn forward_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random(&[2, 6, 6, 3], &mut rng).cast::<f32>();
    let k = random(&[3, 3, 3, 5], &mut rng).cast::<f32>();
    let b = random(&[5], &mut rng).cast::<f32>();
    let run = || {
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(&x).unwrap(), tape.constant(&k).unwrap(), tape.constant(&b).unwrap());
        let y = tape.conv2d(xv, kv, bv, ConvSpec { stride: 2, padding: 1 }).unwrap();
        let y = tape.activation(y, Activation::Hardswish).unwrap();
        let p = tape.global_avg_pool(y).unwrap();
        tape.value(p).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn seeded(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn conv_gradients_match(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2) {
        let inputs = [seeded(seed, &[2, 5, 5, 2]), seeded(seed ^ 1, &[3, 3, 2, 3]), seeded(seed ^ 2, &[3])];
        let errs = grad_check_many(|tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], ConvSpec { stride, padding: pad })?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        // central differences are exact on a quadratic, so a wide step only cuts roundoff
        }, &inputs, 1e-3).unwrap();
        for e in errs { prop_assert!(e < 1e-4, "{e}"); }
    }

    #[test]
    fn dense_gradients_match(seed in any::<u64>()) {
        let inputs = [seeded(seed, &[3, 4]), seeded(seed ^ 1, &[4, 2]), seeded(seed ^ 2, &[2])];
        let labels = [0usize, 1, 1];
        let errs = grad_check_many(|tape, v| {
            let y = tape.dense(v[0], v[1], v[2])?;
            tape.softmax_cross_entropy(y, &labels)
        }, &inputs, 1e-5).unwrap();
        for e in errs { prop_assert!(e < 1e-4, "{e}"); }
    }

    #[test]
    fn activation_gradients_match(seed in any::<u64>(), hardswish in any::<bool>()) {
        let kind = if hardswish { Activation::Hardswish } else { Activation::Relu };
        let x = Tensor::from_fn(vec![12], |i| {
            let t = seeded(seed, &[12]).data()[i] * 5.0;
            // keep clear of the kinks so the central difference is smooth
            if t.abs() < 1e-3 || (t.abs() - 3.0).abs() < 1e-3 { t + 0.01 } else { t }
        });
        let w = seeded(seed ^ 3, &[12]);
        let e = grad_check(|tape, v| {
            let y = tape.activation(v, kind)?;
            let wv = tape.constant(&w)?;
            let z = tape.mul(y, wv)?;
            tape.sum(z)
        }, &x, 1e-6).unwrap();
        prop_assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn pool_softmax_blend_gradients_match(seed in any::<u64>()) {
        let inputs = [seeded(seed, &[2, 3, 3, 4]), seeded(seed ^ 1, &[4]), seeded(seed ^ 2, &[2, 4])];
        let errs = grad_check_many(|tape, v| {
            let blended = tape.blend(v[0], v[1])?;
            let att = tape.softmax_rows(v[2])?;
            let wb = tape.weighted_blend(v[0], att)?;
            let both = tape.mul(blended, wb)?;
            let batch = tape.channels_to_batch(v[0])?;
            let pooled = tape.global_avg_pool(batch)?;
            let r = tape.reshape(pooled, &[2, 4])?;
            let r2 = tape.mul(r, att)?;
            let s1 = tape.sum(both)?;
            let s2 = tape.sum(r2)?;
            tape.add(s1, s2)
        }, &inputs, 1e-5).unwrap();
        for e in errs { prop_assert!(e < 1e-4, "{e}"); }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>()) {
        let x = seeded(seed, &[4, 6]);
        let mut tape = Tape::new();
        let v = tape.constant(&Tensor::from_fn(vec![4, 6], |i| x.data()[i] * 30.0)).unwrap();
        let s = tape.softmax_rows(v).unwrap();
        for row in tape.value(s).chunks(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        let loss = tape.softmax_cross_entropy(v, &[0, 1, 2, 5]).unwrap();
        prop_assert!(tape.value(loss)[0] >= 0.0);
    }
}
