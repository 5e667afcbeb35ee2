use oodprobe::algorithms::*;
use oodprobe::data::{build_rotated, synth_glyphs};
use oodprobe::featurizers::FeaturizerSpec;
use oodprobe::nn::ops::cross_entropy;
use oodprobe::nn::Tensor;
use oodprobe::rng::rng_from;
use oodprobe::Error;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from(seed, &[]);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

fn ce(z: &Tensor<f64>, y: &[usize]) -> f64 {
    cross_entropy(z, y).unwrap().0
}

fn scaled(z: &Tensor<f64>, w: f64) -> Tensor<f64> {
    t(z.shape(), z.data().iter().map(|v| v * w).collect())
}

#[test]
fn erm_examples() {
    let z = rand_t(&[4, 3], 1);
    let y = [0, 2, 1, 1];
    let (single, _) = erm_loss(&[&z], &[&y]).unwrap();
    assert!((single - ce(&z, &y)).abs() < 1e-15);
    let (twice, _) = erm_loss(&[&z, &z], &[&y, &y]).unwrap();
    assert!((twice - ce(&z, &y)).abs() < 1e-15);
    // one-sample envs with CE exactly 0.2 and 0.4: logit gap d = -ln(e^L - 1)
    let gap = |l: f64| -(l.exp() - 1.0).ln();
    let a = t(&[1, 2], vec![gap(0.2), 0.0]);
    let b = t(&[1, 2], vec![gap(0.4), 0.0]);
    assert!((ce(&a, &[0]) - 0.2).abs() < 1e-12);
    let (mixed, grads) = erm_loss(&[&a, &b], &[&[0], &[0]]).unwrap();
    assert!((mixed - 0.3).abs() < 1e-12);
    assert_eq!(grads.len(), 2);
}

#[test]
fn irm_zero_at_scale_stationary_point() {
    let z = rand_t(&[6, 3], 2);
    let y = [0, 1, 2, 0, 1, 2];
    // bisection for the minimiser of the convex map w -> CE(w z, y)
    let dce = |w: f64| (ce(&scaled(&z, w + 1e-6), &y) - ce(&scaled(&z, w - 1e-6), &y)) / 2e-6;
    let (mut lo, mut hi) = (-50.0, 50.0);
    assert!(dce(lo) < 0.0 && dce(hi) > 0.0, "random labels keep the batch non-separable");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dce(mid) > 0.0 {
            hi = mid
        } else {
            lo = mid
        }
    }
    let stationary = scaled(&z, 0.5 * (lo + hi));
    let (p, _) = irm_penalty(&[&stationary], &[&y]).unwrap();
    assert!(p < 1e-9, "penalty {p}");
    assert!(irm_scale_gradient(&stationary, &y).unwrap().abs() < 1e-4);
    let (zero, _) = irm_penalty(&[&Tensor::<f64>::zeros(vec![3, 4])], &[&[0, 1, 2]]).unwrap();
    assert_eq!(zero, 0.0);
}

#[test]
fn irm_matches_finite_difference_scale_derivative() {
    let envs = [rand_t(&[5, 3], 3), rand_t(&[4, 3], 4)];
    let labels: [&[usize]; 2] = [&[0, 1, 2, 2, 1], &[2, 0, 0, 1]];
    let h = 1e-5;
    let fd: f64 = envs
        .iter()
        .zip(labels)
        .map(|(z, y)| {
            let g = (ce(&scaled(z, 1.0 + h), y) - ce(&scaled(z, 1.0 - h), y)) / (2.0 * h);
            g * g
        })
        .sum();
    let (p, _) = irm_penalty(&[&envs[0], &envs[1]], &labels).unwrap();
    assert!((p - fd).abs() / fd.abs().max(1e-12) < 1e-6, "analytic {p} vs fd {fd}");

    let (dup, _) = irm_penalty(&[&envs[0], &envs[0]], &[labels[0], labels[0]]).unwrap();
    let (one, _) = irm_penalty(&[&envs[0]], &[labels[0]]).unwrap();
    assert!((dup - 2.0 * one).abs() < 1e-15);
}

/// Central differences of `f` with respect to every entry of every env tensor.
fn fd_check(envs: &[Tensor<f64>], grads: &[Tensor<f64>], f: impl Fn(&[&Tensor<f64>]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for e in 0..envs.len() {
        for i in 0..envs[e].numel() {
            let mut plus: Vec<Tensor<f64>> = envs.to_vec();
            let mut minus: Vec<Tensor<f64>> = envs.to_vec();
            plus[e].data_mut()[i] += h;
            minus[e].data_mut()[i] -= h;
            let num = (f(&plus.iter().collect::<Vec<_>>()) - f(&minus.iter().collect::<Vec<_>>())) / (2.0 * h);
            let ana = grads[e].data()[i];
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn penalty_gradients_match_finite_differences() {
    let logits = [rand_t(&[4, 3], 5), rand_t(&[4, 3], 6), rand_t(&[4, 3], 7)];
    let labels: [&[usize]; 3] = [&[0, 1, 2, 0], &[1, 1, 2, 0], &[2, 0, 1, 1]];
    let views: Vec<&Tensor<f64>> = logits.iter().collect();
    let (_, g) = irm_penalty(&views, &labels).unwrap();
    let err = fd_check(&logits, &g, |e| irm_penalty(e, &labels).unwrap().0);
    assert!(err < 1e-6, "irm {err}");

    let feats = [rand_t(&[5, 3], 8), rand_t(&[4, 3], 9), rand_t(&[6, 3], 10)];
    let views: Vec<&Tensor<f64>> = feats.iter().collect();
    let (_, g) = coral_penalty(&views).unwrap();
    let err = fd_check(&feats, &g, |e| coral_penalty(e).unwrap().0);
    assert!(err < 1e-6, "coral {err}");
    let (_, g) = mmd_penalty(&views, 0.7).unwrap();
    let err = fd_check(&feats, &g, |e| mmd_penalty(e, 0.7).unwrap().0);
    assert!(err < 1e-6, "mmd {err}");
}

#[test]
fn vrex_examples() {
    assert_eq!(vrex_penalty(&[0.3f64, 0.3, 0.3]).unwrap().0, 0.0);
    let (v, g) = vrex_penalty(&[0.2f64, 0.4]).unwrap();
    assert!((v - 0.01).abs() < 1e-15);
    assert!((g[0] + 0.1).abs() < 1e-15 && (g[1] - 0.1).abs() < 1e-15);
    let (w, _) = vrex_penalty(&[0.4f64, 0.2]).unwrap();
    assert_eq!(v, w);
    assert!(matches!(vrex_penalty(&[0.2f64]), Err(Error::DegenerateStatistics(_))));
}

#[test]
fn groupdro_examples() {
    let (q, loss) = groupdro_reweight(&[0.5, 0.5], &[0.7, 0.7], 0.3).unwrap();
    assert!((q[0] - 0.5).abs() < 1e-15 && (loss - 0.7).abs() < 1e-15);
    let (q, _) = groupdro_reweight(&[0.5, 0.5], &[0.0, 2f64.ln()], 1.0).unwrap();
    assert!((q[0] - 1.0 / 3.0).abs() < 1e-12 && (q[1] - 2.0 / 3.0).abs() < 1e-12);
    assert!(matches!(groupdro_reweight(&[0.6, 0.6], &[0.0, 0.0], 1.0), Err(Error::State(_))));
}

#[test]
fn groupdro_stays_on_simplex() {
    let mut rng = rng_from(11, &[]);
    let mut q = vec![0.25; 4];
    for _ in 0..10_000 {
        let losses: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..5.0)).collect();
        q = groupdro_reweight(&q, &losses, rng.gen_range(0.0..2.0)).unwrap().0;
        assert!(q.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn coral_examples() {
    let a = rand_t(&[6, 4], 12);
    let (p, _) = coral_penalty(&[&a, &a]).unwrap();
    assert!(p.abs() < 1e-9);
    let x = t(&[2, 1], vec![-1.0, 1.0]);
    let y = t(&[2, 1], vec![0.0, 2.0]);
    assert!((coral_penalty(&[&x, &y]).unwrap().0 - 1.0).abs() < 1e-15);
    let y_rev = t(&[2, 1], vec![2.0, 0.0]);
    assert_eq!(coral_penalty(&[&x, &y]).unwrap().0, coral_penalty(&[&x, &y_rev]).unwrap().0);
    let lone = t(&[1, 1], vec![0.0]);
    assert!(matches!(coral_penalty(&[&x, &lone]), Err(Error::DegenerateStatistics(_))));
}

#[test]
fn mmd_examples() {
    let a = rand_t(&[5, 3], 13);
    assert!(mmd_penalty(&[&a, &a], 0.5).unwrap().0.abs() < 1e-12);
    let x = t(&[1, 1], vec![0.0]);
    let y = t(&[1, 1], vec![1.0]);
    let v = mmd_penalty(&[&x, &y], 1.0).unwrap().0;
    assert!((v - (2.0 - 2.0 * (-1f64).exp())).abs() < 1e-12);
    assert!((v - 1.264241).abs() < 1e-6);
    let b = rand_t(&[4, 3], 14);
    let (ab, ba) = (mmd_penalty(&[&a, &b], 0.3).unwrap().0, mmd_penalty(&[&b, &a], 0.3).unwrap().0);
    assert!((ab - ba).abs() < 1e-12);
}

#[test]
fn mixup_examples() {
    let a = t(&[2, 1, 1, 1], vec![0.2, 0.2]);
    let b = t(&[2, 1, 1, 1], vec![0.6, 0.6]);
    let (ya, yb) = ([0usize, 1], [1usize, 1]);
    assert_eq!(mixup_with((&a, &ya), (&b, &yb), 1.0).unwrap().images, a);
    assert_eq!(mixup_with((&a, &ya), (&b, &yb), 0.0).unwrap().images, b);
    let half = mixup_with((&a, &ya), (&b, &yb), 0.5).unwrap();
    assert!(half.images.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    let targets = half.targets(2).unwrap();
    assert_eq!(targets.data(), &[0.5, 0.5, 0.0, 1.0]);
    let short = t(&[1, 1, 1, 1], vec![0.0]);
    assert!(matches!(mixup_with((&a, &ya), (&short, &[0]), 0.5), Err(Error::Dimension { .. })));
    let mut rng = rng_from(3, &[]);
    for _ in 0..100 {
        let m = mixup_minibatches((&a, &ya), (&b, &yb), 0.2, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&m.lambda));
    }
}

#[test]
fn andmask_examples() {
    assert_eq!(andmask_aggregate(&[&[1.0f64][..], &[2.0]], 1.0).unwrap(), vec![1.5]);
    assert_eq!(andmask_aggregate(&[&[1.0f64][..], &[-1.0]], 1.0).unwrap(), vec![0.0]);
    assert_eq!(andmask_aggregate(&[&[1.0f64][..], &[1.0], &[-1.0]], 0.5).unwrap(), vec![0.0]);
}

#[test]
fn algorithm_names() {
    assert_eq!("vrex".parse::<Algorithm>().unwrap(), Algorithm::Vrex);
    assert_eq!(" andmask ".parse::<Algorithm>().unwrap(), Algorithm::AndMask);
    match "IB_IRM".parse::<Algorithm>() {
        Err(Error::InvalidArgument(msg)) => assert!(msg.contains("GroupDRO") && msg.contains("ERM")),
        other => panic!("unexpected {other:?}"),
    }
    for a in Algorithm::ALL {
        assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
    }
}

#[test]
fn config_validation() {
    assert!(AlgorithmConfig::default().validate().is_ok());
    let mut c = AlgorithmConfig::default();
    c.andmask_tau = 1.5;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "andmask_tau"));
    let mut c = AlgorithmConfig::default();
    c.steps = 0;
    assert!(c.validate().is_err());
    assert_eq!(c.penalty_weight(499), 0.0);
    assert_eq!(c.penalty_weight(500), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn penalties_vanish_on_identical_envs(seed in any::<u64>(), n in 2usize..8, d in 1usize..5, envs in 2usize..4) {
        let z = rand_t(&[n, d + 1], seed);
        let f = rand_t(&[n, d], seed ^ 1);
        let zs: Vec<&Tensor<f64>> = vec![&z; envs];
        let fs: Vec<&Tensor<f64>> = vec![&f; envs];
        let y: Vec<usize> = (0..n).map(|i| i % (d + 1)).collect();
        let ys: Vec<&[usize]> = vec![&y; envs];
        let (risks, _) = per_env_risks(&zs, &ys).unwrap();
        prop_assert!(vrex_penalty(&risks).unwrap().0.abs() < 1e-9);
        prop_assert!(coral_penalty(&fs).unwrap().0.abs() < 1e-9);
        prop_assert!(mmd_penalty(&fs, 1.0 / d as f64).unwrap().0.abs() < 1e-9);
        prop_assert!(irm_penalty(&zs, &ys).unwrap().0 >= 0.0);
    }

    #[test]
    fn andmask_outputs_zero_or_mean(seed in any::<u64>(), envs in 2usize..5, tau in 0.0f64..=1.0) {
        let mut rng = rng_from(seed, &[]);
        let grads: Vec<Vec<f64>> = (0..envs)
            .map(|_| (0..16).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect())
            .collect();
        let views: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let out = andmask_aggregate(&views, tau).unwrap();
        for (j, v) in out.iter().enumerate() {
            let mean = grads.iter().map(|g| g[j]).sum::<f64>() / envs as f64;
            prop_assert!(*v == 0.0 || *v == mean);
        }
    }
}

fn tiny_setup() -> (FeaturizerSpec, oodprobe::data::EnvironmentDataset) {
    let base = synth_glyphs(0, 12).unwrap();
    let ds = build_rotated(&base, &[0.0, 30.0, 60.0], 60, 1).unwrap();
    (FeaturizerSpec::mini_cnn_with([1, 28, 28], [2, 4, 4, 4]), ds)
}

fn quick(algorithm: Algorithm) -> AlgorithmConfig {
    AlgorithmConfig {
        algorithm,
        steps: 12,
        batch_size: 6,
        anneal_step: 0,
        eval_interval: 6,
        checkpoint_every: 6,
        ..Default::default()
    }
}

#[test]
fn zero_lambda_reduces_to_erm() {
    let (spec, ds) = tiny_setup();
    let erm = train_algorithm(&quick(Algorithm::Erm), &spec, &ds, 0, 4).unwrap();
    let reference = erm.final_checkpoint().to_bytes().unwrap();
    for a in Algorithm::ALL.into_iter().filter(|a| a.is_penalized()) {
        let mut c = quick(a);
        c.lambda = 0.0;
        let run = train_algorithm(&c, &spec, &ds, 0, 4).unwrap();
        // metadata names the algorithm, so compare the weights only
        let mut ckpt = run.final_checkpoint().clone();
        ckpt.meta.algorithm = "ERM".into();
        assert_eq!(ckpt.to_bytes().unwrap(), reference, "{a}");
        assert_eq!(run.objective, erm.objective, "{a}");
        // and with the penalty switched on the trajectory differs
        let on = train_algorithm(&quick(a), &spec, &ds, 0, 4).unwrap();
        assert_ne!(on.objective, erm.objective, "{a}");
    }
}

#[test]
fn every_algorithm_trains_and_is_deterministic() {
    let (spec, ds) = tiny_setup();
    for a in Algorithm::ALL {
        let first = train_algorithm(&quick(a), &spec, &ds, 1, 9).unwrap();
        let second = train_algorithm(&quick(a), &spec, &ds, 1, 9).unwrap();
        assert_eq!(first.checkpoints.len(), 2, "{a}");
        assert_eq!(first.final_checkpoint().meta.step, 12);
        assert_eq!(
            first.final_checkpoint().to_bytes().unwrap(),
            second.final_checkpoint().to_bytes().unwrap(),
            "{a}"
        );
        assert!(first.objective.iter().all(|v| v.is_finite()));
        assert!((0.0..=1.0).contains(&first.test_accuracy));
    }
}

#[test]
fn divergence_is_a_training_failure() {
    let (spec, ds) = tiny_setup();
    let mut c = quick(Algorithm::Erm);
    c.lr = 1e30;
    match train_algorithm(&c, &spec, &ds, 0, 0) {
        Err(Error::TrainingFailure { step, .. }) => assert!(step < 12),
        other => panic!("unexpected {:?}", other.map(|r| r.objective)),
    }
}

#[test]
fn erm_objective_descends_early() {
    let base = synth_glyphs(0, 40).unwrap();
    let ds = build_rotated(&base, &[0.0, 30.0, 60.0], 200, 1).unwrap();
    let spec = FeaturizerSpec::mini_cnn_with([1, 28, 28], [4, 8, 8, 8]);
    let mut c = quick(Algorithm::Erm);
    c.steps = 100;
    c.batch_size = 16;
    c.eval_interval = 100;
    c.checkpoint_every = 100;
    let mut head = 0.0;
    let mut tail = 0.0;
    for seed in 0..3 {
        let run = train_algorithm(&c, &spec, &ds, 0, seed).unwrap();
        head += run.objective[..10].iter().sum::<f64>() / 30.0;
        tail += run.objective[90..].iter().sum::<f64>() / 30.0;
    }
    assert!(tail < head, "objective {head} -> {tail}");
}
