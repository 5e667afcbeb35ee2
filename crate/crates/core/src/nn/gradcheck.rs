//! Central finite-difference verification of analytic gradients.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::layers::{Layer, Mode, Module, Sequential};
use crate::nn::ops::cross_entropy;
use crate::nn::{LayerSpec, Tensor};
use crate::rng::rng_from;

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// Scalar objective placed on top of the network output.
#[derive(Clone, Debug)]
pub enum CheckLoss {
    /// Mean softmax cross-entropy against the given labels (output must be 2-D).
    CrossEntropy(Vec<usize>),
    /// `sum(weights * output)`; weights length must equal the output size.
    Projection(Vec<f64>),
}

impl CheckLoss {
    /// A projection with seeded standard-uniform weights.
    pub fn random_projection(len: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0x6772_6164]);
        CheckLoss::Projection((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn value_and_grad(&self, out: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        match self {
            CheckLoss::CrossEntropy(labels) => cross_entropy(out, labels),
            CheckLoss::Projection(w) => {
                if w.len() != out.numel() {
                    return Err(Error::dim("grad_check", "projection", out.numel(), w.len()));
                }
                let v = out.data().iter().zip(w).map(|(a, b)| a * b).sum();
                Ok((v, Tensor::new(out.shape().to_vec(), w.clone())?))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name (or `input`) and coordinate of the worst mismatch.
    pub worst: (String, usize),
    pub coordinates: usize,
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds `specs` at 64-bit with `seed`, then checks every parameter and input
/// coordinate.
pub fn grad_check(specs: &[LayerSpec], input: &Tensor<f64>, loss: &CheckLoss, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng_from(seed, &[]);
    let mut net: Sequential<f64> = Sequential::build(specs, "check", &mut rng)?;
    grad_check_module(&mut net, input, loss)
}

/// Checks an arbitrary module in training mode.
pub fn grad_check_module<M: Module<f64>>(module: &mut M, input: &Tensor<f64>, loss: &CheckLoss) -> Result<GradCheckReport> {
    module.zero_grad();
    let out = module.forward(input, Mode::Train)?;
    let (_, g) = loss.value_and_grad(&out)?;
    let dx = module.backward(&g)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit_params(&mut |p| {
        let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.numel()]);
        analytic.push((p.name().to_string(), g));
    });

    let eval = |m: &mut M, x: &Tensor<f64>| -> Result<f64> {
        let out = m.forward(x, Mode::Train)?;
        Ok(loss.value_and_grad(&out)?.0)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        coordinates: 0,
    };
    let mut record = |name: &str, i: usize, a: f64, n: f64| -> Result<()> {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at {name}[{i}]: analytic {a}, numeric {n}")));
        }
        let e = relative_error(a, n);
        report.coordinates += 1;
        if e > report.max_rel_error || report.worst.0.is_empty() {
            report.max_rel_error = e;
            report.worst = (name.to_string(), i);
        }
        Ok(())
    };

    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = nth_param_value(module, pi, i);
            set_nth_param_value(module, pi, i, orig + FD_STEP);
            let fp = eval(module, input)?;
            set_nth_param_value(module, pi, i, orig - FD_STEP);
            let fm = eval(module, input)?;
            set_nth_param_value(module, pi, i, orig);
            record(name, i, a, (fp - fm) / (2.0 * FD_STEP))?;
        }
    }

    let mut x = input.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let fp = eval(module, &x)?;
        x.data_mut()[i] = orig - FD_STEP;
        let fm = eval(module, &x)?;
        x.data_mut()[i] = orig;
        record("input", i, dx.data()[i], (fp - fm) / (2.0 * FD_STEP))?;
    }
    Ok(report)
}

fn nth_param_value<M: Module<f64>>(m: &M, pi: usize, i: usize) -> f64 {
    let mut k = 0;
    let mut v = 0.0;
    m.visit_params(&mut |p| {
        if k == pi {
            v = p.data()[i];
        }
        k += 1;
    });
    v
}

fn set_nth_param_value<M: Module<f64>>(m: &mut M, pi: usize, i: usize, v: f64) {
    let mut k = 0;
    m.visit_params_mut(&mut |p| {
        if k == pi {
            p.value.data_mut()[i] = v;
        }
        k += 1;
    });
}

/// A small randomized network with a matching input and objective.
#[derive(Clone, Debug)]
pub struct RandomCase {
    pub specs: Vec<LayerSpec>,
    pub input: Tensor<f64>,
    pub loss: CheckLoss,
    pub seed: u64,
}

/// Draws a conv/batch-norm/relu/pool/residual stack ending in linear layers.
pub fn random_case(seed: u64) -> Result<RandomCase> {
    let mut rng = rng_from(seed, &[0x6361_7365]);
    let n = rng.gen_range(2..=3);
    let (mut c, mut h, mut w) = (rng.gen_range(1..=2), rng.gen_range(4..=7), rng.gen_range(4..=7));
    let input_shape = [n, c, h, w];
    let mut specs = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let spec = match rng.gen_range(0..5) {
            0 | 1 => {
                let padding = rng.gen_range(0..=1);
                let kernel = rng.gen_range(1..=3).min(h.min(w) + 2 * padding);
                LayerSpec::Conv {
                    in_channels: c,
                    out_channels: rng.gen_range(1..=3),
                    kernel,
                    stride: rng.gen_range(1..=2),
                    padding,
                    bias: rng.gen_bool(0.5),
                }
            }
            2 => LayerSpec::BatchNorm { channels: c },
            3 if h >= 2 && w >= 2 => LayerSpec::AvgPool { kernel: 2 },
            3 => LayerSpec::Relu,
            _ => LayerSpec::ResidualBlock { in_channels: c, out_channels: rng.gen_range(1..=3), stride: rng.gen_range(1..=2) },
        };
        let out = spec.output_shape(&[c, h, w])?;
        (c, h, w) = (out[0], out[1], out[2]);
        specs.push(spec);
        if rng.gen_bool(0.5) {
            specs.push(LayerSpec::Relu);
        }
    }
    let width = if rng.gen_bool(0.5) {
        specs.push(LayerSpec::GlobalAvgPool);
        c
    } else {
        specs.push(LayerSpec::Flatten);
        c * h * w
    };
    let classes = rng.gen_range(2..=4);
    if rng.gen_bool(0.5) {
        let hidden = rng.gen_range(2..=5);
        specs.push(LayerSpec::Linear { in_features: width, out_features: hidden });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::Linear { in_features: hidden, out_features: classes });
    } else {
        specs.push(LayerSpec::Linear { in_features: width, out_features: classes });
    }
    let input = Tensor::from_fn(input_shape.to_vec(), |_| rng.gen_range(-1.0..1.0));
    let loss = if rng.gen_bool(0.5) {
        CheckLoss::CrossEntropy((0..n).map(|_| rng.gen_range(0..classes)).collect())
    } else {
        CheckLoss::random_projection(n * classes, seed)
    };
    Ok(RandomCase { specs, input, loss, seed })
}

/// Builds the case's network with its zero-initialized offsets (biases,
/// batch-norm shifts) redrawn uniformly, so no ReLU sits exactly on its kink.
pub fn build_case(case: &RandomCase) -> Result<Sequential<f64>> {
    let mut rng = rng_from(case.seed, &[]);
    let mut net: Sequential<f64> = Sequential::build(&case.specs, "check", &mut rng)?;
    net.visit_params_mut(&mut |p| {
        if p.name().ends_with(".bias") || p.name().ends_with(".beta") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    });
    Ok(net)
}

/// Smallest |input| to any ReLU, including those inside residual blocks, in
/// a training-mode forward pass.
/// A finite difference across a kink is meaningless, so checks want this
/// well above the step.
pub fn relu_margin(net: &mut Sequential<f64>, input: &Tensor<f64>) -> Result<f64> {
    let mut x = input.clone();
    let mut margin = f64::INFINITY;
    for layer in &mut net.layers {
        match layer {
            Layer::Relu(_) => margin = x.data().iter().fold(margin, |m, v| m.min(v.abs())),
            Layer::Residual(block) => margin = margin.min(block.relu_margin(&x)?),
            _ => {}
        }
        x = layer.forward(&x, Mode::Train)?;
    }
    Ok(margin)
}

/// Minimum distance from a ReLU kink accepted by [`smooth_case`].
pub const KINK_MARGIN: f64 = 1e-3;

/// First case derived from `seed` whose ReLU inputs all clear [`KINK_MARGIN`].
pub fn smooth_case(seed: u64) -> Result<(RandomCase, Sequential<f64>)> {
    for attempt in 0..1000u64 {
        let case = random_case(crate::rng::derive_seed(seed, &[attempt]))?;
        let mut net = build_case(&case)?;
        if relu_margin(&mut net, &case.input)? >= KINK_MARGIN {
            return Ok((case, net));
        }
    }
    Err(Error::Sampling(format!("no kink-free case from seed {seed}")))
}

/// Runs `count` kink-free random cases with seeds derived from `seed`.
pub fn grad_check_suite(count: usize, seed: u64) -> Result<Vec<(RandomCase, GradCheckReport)>> {
    (0..count as u64)
        .map(|i| {
            let (case, mut net) = smooth_case(crate::rng::derive_seed(seed, &[i]))?;
            let report = grad_check_module(&mut net, &case.input, &case.loss)?;
            Ok((case, report))
        })
        .collect()
}
