mod common;

use std::path::PathBuf;

use dcmix::data::*;

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn load_mnist() -> LabeledDataset {
    let dir = mnist_dir();
    load_mnist_idx(dir.join("images-idx3-ubyte.gz"), dir.join("labels-idx1-ubyte.gz")).unwrap()
}

fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let ((ma, va, na), (mb, vb, nb)) = (stats(a), stats(b));
    (ma - mb) / (va / na + vb / nb).sqrt()
}

/// Largest per-pixel |t| between the class-0 and class-1 images of a channel.
fn max_abs_t(ds: &LabeledDataset, channel: usize) -> f64 {
    let (h, w, _) = ds.image_shape().unwrap();
    (0..h * w)
        .map(|p| {
            let pick = |class| -> Vec<f64> {
                ds.images
                    .iter()
                    .zip(&ds.labels)
                    .filter(|(_, &l)| l == class)
                    .map(|(im, _)| f64::from(im.channel(channel)[p]))
                    .collect()
            };
            welch_t(&pick(0), &pick(1)).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn synthetic_signal_differs_by_class_and_noise_does_not() {
    let spec = SynthSpec { samples: 1200, size: 8, classes: 2, seed: 3, ..SynthSpec::default() };
    let ds = synth_multispectral(&spec).unwrap();
    assert!(max_abs_t(&ds, 0) > 10.0);
    assert!(max_abs_t(&ds, 1) > 10.0);
    // 64 pixels per channel: a Bonferroni-style bound for pure noise
    for ch in [4, 5] {
        let t = max_abs_t(&ds, ch);
        assert!(t < 4.5, "noise channel {ch}: |t| = {t}");
    }
}

#[test]
fn linear_probe_learns_single_signal_channel() {
    let spec = SynthSpec {
        samples: 800,
        signal_channels: 1,
        redundant_channels: 0,
        noise_channels: 0,
        size: 8,
        classes: 3,
        seed: 5,
        ..SynthSpec::default()
    };
    let ds = normalize_01(&synth_multispectral(&spec).unwrap());
    let (train, test) = (ds.select(&(0..400).collect::<Vec<_>>()), ds.select(&(400..800).collect::<Vec<_>>()));
    let acc = common::linear_probe(&train, &test, &[0], 200);
    assert!(acc > 0.6, "{acc}");
}

#[test]
fn noise_channels_carry_no_label_information() {
    let spec = SynthSpec { samples: 10_000, size: 8, classes: 2, seed: 6, ..SynthSpec::default() };
    let ds = normalize_01(&synth_multispectral(&spec).unwrap());
    let (train, test) = (ds.select(&(0..2000).collect::<Vec<_>>()), ds.select(&(2000..10_000).collect::<Vec<_>>()));
    let acc = common::linear_probe(&train, &test, &[4, 5], 100);
    assert!((acc - 0.5).abs() < 0.02, "{acc}");
}

#[test]
fn bundled_mnist_has_expected_shape() {
    let ds = load_mnist();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.image_shape(), Some((28, 28, 1)));
    assert_eq!(ds.class_count, 10);
    assert_eq!(ds.class_histogram(), vec![1001, 1127, 991, 1032, 980, 863, 1014, 1070, 944, 978]);
    assert!(ds.images.iter().all(|im| im.pixels().iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v))));
}

#[test]
fn mnist_construction_chain() {
    let ds = load_mnist();
    let noisy = normalize_01(&add_noise_channels(&ds, 2, 0).unwrap());
    assert_eq!(noisy.image_shape(), Some((28, 28, 3)));
    assert_eq!(noisy.ground_truth_importance, Some(vec![1, 2, 3]));
    assert!(noisy.images.iter().all(|im| im.pixels().iter().all(|v| (0.0..=1.0).contains(v))));

    let (train, val, hold) = split(&noisy, &SplitSpec::default()).unwrap();
    assert_eq!((hold.len(), val.len(), train.len()), (3000, 1400, 5600));
    for (h, &total) in hold.class_histogram().iter().zip(&ds.class_histogram()) {
        assert!((*h as f64 - 0.3 * total as f64).abs() <= 1.0);
    }

    // the same seeds rebuild the same bytes
    let again = normalize_01(&add_noise_channels(&load_mnist(), 2, 0).unwrap());
    let (t2, v2, h2) = split(&again, &SplitSpec::default()).unwrap();
    for (a, b) in [(&train, &t2), (&val, &v2), (&hold, &h2)] {
        assert_eq!(encode_container(a).unwrap(), encode_container(b).unwrap());
    }
}

#[test]
fn missing_label_file_is_an_io_error() {
    let dir = mnist_dir();
    let err = load_mnist_idx(dir.join("images-idx3-ubyte.gz"), dir.join("absent-labels")).unwrap_err();
    assert!(err.to_string().contains("absent-labels") || matches!(err, dcmix::Error::Io(_)), "{err}");
}
