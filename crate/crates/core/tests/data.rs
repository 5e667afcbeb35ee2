use oodprobe::data::*;
use oodprobe::nn::Tensor;
use oodprobe::Error;
use proptest::prelude::*;

fn tiny(n: usize) -> LabeledImages {
    let data = (0..n * 4).map(|i| (i % 7) as f32 / 7.0).collect();
    LabeledImages::new(Tensor::new(vec![n, 1, 2, 2], data).unwrap(), (0..n).map(|i| i % 3).collect(), 3).unwrap()
}

#[test]
fn glyphs_deterministic_and_balanced() {
    let a = synth_glyphs(7, 100).unwrap();
    let b = synth_glyphs(7, 100).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 1000);
    for k in 0..10 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 100);
    }
    assert_ne!(a, synth_glyphs(8, 100).unwrap());
    assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

/// Multinomial logistic regression on raw pixels, full-batch gradient descent.
#[test]
fn glyphs_linearly_separable() {
    let per = 300;
    let data = synth_glyphs(3, per).unwrap();
    let d = 784;
    let mut order: Vec<usize> = (0..data.len()).collect();
    // interleave classes so the 80/20 cut is stratified
    order.sort_by_key(|&i| (i % per, i / per));
    let (train, test) = order.split_at(8 * per);
    let x = |i: usize| &data.images.data()[i * d..(i + 1) * d];
    let mut w = vec![0f64; d * 10];
    let mut b = [0f64; 10];
    let logits = |w: &[f64], b: &[f64; 10], i: usize| {
        let mut z = *b;
        for (j, &v) in x(i).iter().enumerate() {
            if v != 0.0 {
                for k in 0..10 {
                    z[k] += v as f64 * w[j * 10 + k];
                }
            }
        }
        z
    };
    for _ in 0..150 {
        let mut gw = vec![0f64; d * 10];
        let mut gb = [0f64; 10];
        for &i in train {
            let z = logits(&w, &b, i);
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..10 {
                let g = e[k] / s - f64::from(data.labels[i] == k);
                gb[k] += g;
                for (j, &v) in x(i).iter().enumerate() {
                    gw[j * 10 + k] += g * v as f64;
                }
            }
        }
        let lr = 0.5 / train.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z = logits(&w, &b, i);
            let pred = (0..10).fold(0, |best, k| if z[k] > z[best] { k } else { best });
            pred == data.labels[i]
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.95, "held-out linear accuracy {acc}");
}

#[test]
fn rotated_identity_and_count() {
    let base = synth_glyphs(1, 20).unwrap();
    let ds = build_rotated(&base, &[0.0, 15.0, 30.0, 45.0, 60.0, 75.0], 50, 9).unwrap();
    assert_eq!(ds.num_envs(), 6);
    assert_eq!(ds.env_params[3], EnvParam::RotationDegrees(45.0));
    // angle 0 reproduces the sampled originals exactly
    let env0 = &ds.environments[0];
    for k in 0..env0.len() {
        let img = &env0.images.data()[k * 784..(k + 1) * 784];
        let found = (0..base.len()).any(|i| &base.images.data()[i * 784..(i + 1) * 784] == img && base.labels[i] == env0.labels[k]);
        assert!(found, "sample {k} is not a bit-identical original");
    }
    let again = build_rotated(&base, &[0.0, 15.0, 30.0, 45.0, 60.0, 75.0], 50, 9).unwrap();
    for (a, b) in ds.environments.iter().zip(&again.environments) {
        assert_eq!(a, b);
    }
}

#[test]
fn rotation_round_trip() {
    let base = synth_glyphs(2, 10).unwrap();
    for i in 0..base.len() {
        let img = &base.images.data()[i * 784..(i + 1) * 784];
        let there = rotate_image(img, 1, 28, 28, 30.0);
        let back = rotate_image(&there, 1, 28, 28, -30.0);
        let mae: f64 = img.iter().zip(&back).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / 784.0;
        assert!(mae < 0.02, "image {i}: mae {mae}");
    }
}

#[test]
fn rotated_sampling_error() {
    let base = tiny(5);
    assert!(matches!(build_rotated(&base, &[0.0], 6, 0), Err(Error::Sampling(_))));
}

#[test]
fn colored_degenerate_and_single_channel() {
    let base = synth_glyphs(4, 30).unwrap();
    let ds = build_colored(&base, &[1.0, 0.8, 0.1], 0.0, 300, 5).unwrap();
    for (e, env) in ds.environments.iter().enumerate() {
        assert_eq!(env.image_shape(), [2, 28, 28]);
        for k in 0..env.len() {
            let img = &env.images.data()[k * 1568..(k + 1) * 1568];
            let nz: Vec<bool> = (0..2).map(|c| img[c * 784..(c + 1) * 784].iter().any(|&v| v != 0.0)).collect();
            assert_eq!(nz.iter().filter(|&&b| b).count(), 1, "env {e} sample {k}");
            if e == 0 {
                assert!(nz[env.labels[k]], "corr 1 must put the image in the label channel");
            }
        }
    }
}

#[test]
fn colored_correlation_rate() {
    let base = synth_glyphs(5, 1000).unwrap();
    let ds = build_colored(&base, &[0.9], 0.25, 10000, 11).unwrap();
    let env = &ds.environments[0];
    let agree = (0..env.len())
        .filter(|&k| {
            let img = &env.images.data()[k * 1568..(k + 1) * 1568];
            let ch = usize::from(img[..784].iter().all(|&v| v == 0.0));
            ch == env.labels[k]
        })
        .count();
    let p = agree as f64 / env.len() as f64;
    assert!((0.88..=0.92).contains(&p), "p_hat {p}");
    assert!((p - 0.9).abs() < 3.0 * (0.9f64 * 0.1 / 10000.0).sqrt());
}

#[test]
fn colored_rejects_bad_probabilities() {
    let base = tiny(10);
    assert!(build_colored(&base, &[1.2], 0.1, 5, 0).is_err());
    assert!(build_colored(&base, &[0.5], 0.6, 5, 0).is_err());
}

#[test]
fn split_arithmetic() {
    let env = tiny(10);
    let s = split_in_out(&env, 0.2, 3).unwrap();
    assert_eq!((s.in_split.len(), s.out_split.len()), (8, 2));
    assert!(s.in_indices.iter().all(|i| !s.out_indices.contains(i)));
    let t = split_in_out(&env, 0.2, 3).unwrap();
    assert_eq!(s.out_indices, t.out_indices);
    assert!(matches!(split_in_out(&tiny(1), 0.2, 0), Err(Error::Split(_))));
}

#[test]
fn dataset_splits_are_deterministic() {
    let base = synth_glyphs(1, 10).unwrap();
    let ds = build_rotated(&base, &[0.0, 30.0, 60.0], 40, 2).unwrap();
    let a = ds.splits().unwrap();
    let b = ds.splits().unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.out_indices, y.out_indices);
        assert_eq!(x.out_split.len(), 8);
    }
    assert_eq!(ds.training_envs(1).unwrap(), vec![0, 2]);
    assert!(ds.training_envs(3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_source(n in 2usize..300, fraction in 0.01f64..0.99, seed in any::<u64>()) {
        let s = split_in_out(&tiny(n), fraction, seed).unwrap();
        let mut all: Vec<usize> = s.in_indices.iter().chain(&s.out_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let target = fraction * n as f64;
        prop_assert!((s.out_indices.len() as f64 - target).abs() <= 1.0);
    }

    #[test]
    fn rotation_preserves_mass(seed in 0u64..1000, angle in -75.0f64..=75.0) {
        let g = synth_glyphs(seed, 1).unwrap();
        for i in 0..g.len() {
            let img = &g.images.data()[i * 784..(i + 1) * 784];
            let before: f64 = img.iter().map(|&v| v as f64).sum();
            let after: f64 = rotate_image(img, 1, 28, 28, angle).iter().map(|&v| v as f64).sum();
            prop_assert!((after - before).abs() <= 0.02 * before, "class {} mass {} -> {}", i, before, after);
        }
    }
}
