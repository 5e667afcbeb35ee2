//! Linear environment probes on frozen checkpoints.

mod bound;

pub use bound::{dummy_accuracy, log_class_size, recommend_probe_samples, sample_bound, EFFECTIVE_BITS};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{EnvironmentDataset, LabeledImages};
use crate::error::{Error, Result};
use crate::featurizers::{flatten_tap, Checkpoint, Network, TapPoint};
use crate::metrics::{CellKey, Metric, MetricRecord, Split};
use crate::nn::layers::Linear;
use crate::nn::ops::{argmax_rows, cross_entropy};
use crate::nn::{optimizer_step, Mode, Module, Tensor, UpdateRule};
use crate::rng::{derive_seed, rng_from, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Maximum number of minibatches.
    pub budget: usize,
    pub eval_interval: usize,
    /// Consecutive evals without `min_delta` gain before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Train on per-sample shuffled environment labels instead of the true ones.
    pub control: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 1e-3, batch_size: 64, budget: 2000, eval_interval: 100, patience: 3, min_delta: 0.002, control: false }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: format!("probe.{key}"), message: message.into() });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.budget == 0 {
            return bad("budget", "must be >= 1");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience", "must be >= 1");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta", "must be non-negative");
        }
        Ok(())
    }
}

/// A linear map from one flattened tap to environment logits.
#[derive(Clone, Debug)]
pub struct Probe {
    pub tap: TapPoint,
    pub linear: Linear<f32>,
    pub num_classes: usize,
}

impl Probe {
    pub fn new(tap: TapPoint, num_classes: usize) -> Self {
        let linear = Linear::zeros(&format!("probe{}", tap.index), tap.width(), num_classes);
        Probe { tap, linear, num_classes }
    }

    pub fn input_dim(&self) -> usize {
        self.linear.weight.shape()[0]
    }

    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<usize>> {
        argmax_rows(&self.linear.infer(features)?)
    }
}

/// One zero-initialized probe per tap of the checkpoint.
pub fn attach_probes(checkpoint: &Checkpoint, num_classes: usize) -> Result<Vec<Probe>> {
    let declared = checkpoint.network.spec().tap_points()?;
    if declared.as_slice() != checkpoint.network.taps() {
        return Err(Error::Checkpoint("tap list disagrees with the architecture manifest".into()));
    }
    Ok(declared.into_iter().map(|t| Probe::new(t, num_classes)).collect())
}

/// Outcome of training one probe on precomputed features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    /// Validation accuracy at the last eval. Taking the best point instead
    /// would select on validation noise.
    pub accuracy: f64,
    pub best: f64,
    /// (minibatches seen, validation accuracy) at every eval.
    pub curve: Vec<(usize, f64)>,
    pub samples_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub algorithm: String,
    pub dataset: String,
    pub test_env: usize,
    pub seed: u64,
    /// Training step of the probed checkpoint.
    pub checkpoint_step: usize,
    pub tap_index: usize,
    pub num_classes: usize,
    pub control: bool,
    pub accuracy: f64,
    pub curve: Vec<(usize, f64)>,
    pub samples_used: usize,
}

impl ProbeResult {
    pub fn cell(&self) -> CellKey {
        CellKey { algorithm: self.algorithm.clone(), dataset: self.dataset.clone(), test_env: self.test_env, seed: self.seed }
    }

    /// JSONL rows: the curve points followed by the final accuracy.
    pub fn records(&self) -> Vec<MetricRecord> {
        let key = self.cell();
        let with_tap = |mut r: MetricRecord| {
            r.tap_index = Some(self.tap_index);
            r
        };
        let mut out: Vec<MetricRecord> = if self.control {
            Vec::new()
        } else {
            self.curve.iter().map(|&(s, a)| with_tap(key.record(s, Split::Out, Metric::ProbeValCurve, a))).collect()
        };
        let metric = if self.control { Metric::ProbeControlAcc } else { Metric::ProbeAcc };
        out.push(with_tap(key.record(self.checkpoint_step, Split::Out, metric, self.accuracy)));
        out
    }
}

const CHUNK: usize = 256;

/// Flattened eval-mode activations at `tap` for every image.
pub fn tap_features(net: &Network, images: &LabeledImages, tap: usize) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for start in (0..images.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(images.len());
        parts.push(flatten_tap(&net.forward_to_tap(&images.images.slice_rows(start, end)?, tap)?)?);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn accuracy(probe: &Probe, x: &Tensor<f32>, y: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for start in (0..y.len()).step_by(CHUNK * 4) {
        let end = (start + CHUNK * 4).min(y.len());
        let pred = probe.predict(&x.slice_rows(start, end)?)?;
        correct += pred.iter().zip(&y[start..end]).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / y.len() as f64)
}

/// Trains `probe` with cross-entropy on `train`, validating on `val`.
pub fn fit_probe(
    probe: &mut Probe,
    train: (&Tensor<f32>, &[usize]),
    val: (&Tensor<f32>, &[usize]),
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeFit> {
    config.validate()?;
    let (x, y) = train;
    let (n, d) = x.dims2("probe")?;
    if d != probe.input_dim() {
        return Err(Error::dim("probe", "features", probe.input_dim(), d));
    }
    if n != y.len() || val.0.shape()[0] != val.1.len() {
        return Err(Error::dim("probe", "rows", n, y.len()));
    }
    if n == 0 || val.1.is_empty() {
        return Err(Error::Protocol("probe needs non-empty train and validation sets".into()));
    }
    if let Some(&l) = y.iter().chain(val.1).find(|&&l| l >= probe.num_classes) {
        return Err(Error::Label { index: 0, label: l, classes: probe.num_classes });
    }
    let mut rng = rng_from(seed, &[tag("probe-batches")]);
    let batch = config.batch_size.min(n);
    let rule = UpdateRule::adam(config.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n;

    let first = accuracy(probe, val.0, val.1)?;
    let mut curve = vec![(0, first)];
    let mut best = first;
    let mut stale = 0;
    for step in 1..=config.budget {
        if pos + batch > n {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let idx = &order[pos..pos + batch];
        pos += batch;
        let xb = x.select_rows(idx)?;
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        probe.linear.zero_grad();
        let logits = probe.linear.forward(&xb, Mode::Train)?;
        let (_, g) = cross_entropy(&logits, &yb)?;
        probe.linear.backward(&g)?;
        optimizer_step(&mut probe.linear.params_mut(), &rule)?;

        if step % config.eval_interval == 0 || step == config.budget {
            let acc = accuracy(probe, val.0, val.1)?;
            curve.push((step, acc));
            if acc < best + config.min_delta {
                stale += 1;
            } else {
                stale = 0;
            }
            best = best.max(acc);
            if stale >= config.patience {
                break;
            }
        }
    }
    let (steps, last) = *curve.last().expect("curve starts with the initial eval");
    Ok(ProbeFit { accuracy: last, best, curve, samples_used: steps * batch })
}

/// Environment-labelled features for one tap: (in-split, out-split) pools.
struct EnvPools {
    train: (Tensor<f32>, Vec<usize>),
    val: (Tensor<f32>, Vec<usize>),
}

fn env_pools(net: &Network, dataset: &EnvironmentDataset, test_env: usize, tap: usize, control: Option<u64>) -> Result<EnvPools> {
    let envs = dataset.training_envs(test_env)?;
    let mut pools = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for (label, &e) in envs.iter().enumerate() {
        let split = dataset.split(e)?;
        for (pool, part) in pools.iter_mut().zip([&split.in_split, &split.out_split]) {
            pool.0.push(tap_features(net, part, tap)?);
            pool.1.extend(std::iter::repeat_n(label, part.len()));
        }
    }
    let [mut train, mut val] = pools;
    if let Some(seed) = control {
        let mut rng = rng_from(seed, &[tag("control-labels")]);
        train.1.shuffle(&mut rng);
        val.1.shuffle(&mut rng);
    }
    let cat = |parts: Vec<Tensor<f32>>| Tensor::concat_rows(&parts.iter().collect::<Vec<_>>());
    Ok(EnvPools { train: (cat(train.0)?, train.1), val: (cat(val.0)?, val.1) })
}

fn check_compatible(probe: &Probe, checkpoint: &Checkpoint, dataset: &EnvironmentDataset) -> Result<()> {
    let taps = checkpoint.network.taps();
    match taps.get(probe.tap.index) {
        Some(t) if *t == probe.tap && t.width() == probe.input_dim() => {}
        _ => return Err(Error::Checkpoint(format!("probe for tap {} does not match the checkpoint architecture", probe.tap.index))),
    }
    if checkpoint.network.spec().input_shape != dataset.image_shape() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects inputs {:?}, dataset has {:?}",
            checkpoint.network.spec().input_shape,
            dataset.image_shape()
        )));
    }
    Ok(())
}

fn probe_seed(seed: u64, test_env: usize, tap: usize, control: bool) -> u64 {
    derive_seed(seed, &[tag("probe"), test_env as u64, tap as u64, control as u64])
}

/// Trains one probe to recover the training-environment index of each sample.
pub fn train_probe(
    probe: &mut Probe,
    checkpoint: &Checkpoint,
    dataset: &EnvironmentDataset,
    test_env: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let m = dataset.training_envs(test_env)?.len();
    if m < 2 {
        return Err(Error::Protocol(format!("probing needs at least 2 training environments, have {m}")));
    }
    if probe.num_classes != m {
        return Err(Error::Protocol(format!("probe has {} classes but there are {m} training environments", probe.num_classes)));
    }
    check_compatible(probe, checkpoint, dataset)?;
    let s = probe_seed(seed, test_env, probe.tap.index, config.control);
    let pools = env_pools(&checkpoint.network, dataset, test_env, probe.tap.index, config.control.then_some(s))?;
    let fit = fit_probe(probe, (&pools.train.0, &pools.train.1), (&pools.val.0, &pools.val.1), config, s)?;
    Ok(ProbeResult {
        algorithm: checkpoint.meta.algorithm.clone(),
        dataset: dataset.name.clone(),
        test_env,
        seed: checkpoint.meta.seed,
        checkpoint_step: checkpoint.meta.step,
        tap_index: probe.tap.index,
        num_classes: m,
        control: config.control,
        accuracy: fit.accuracy,
        curve: fit.curve,
        samples_used: fit.samples_used,
    })
}

/// Every probe of one checkpoint, with the featurizer checksum verified afterwards.
pub fn probe_checkpoint(checkpoint: &Checkpoint, dataset: &EnvironmentDataset, config: &ProbeConfig) -> Result<Vec<ProbeResult>> {
    let before = checkpoint.featurizer_checksum();
    let test_env = checkpoint.meta.test_env;
    let m = dataset.training_envs(test_env)?.len();
    let mut out = Vec::new();
    for mut probe in attach_probes(checkpoint, m)? {
        out.push(train_probe(&mut probe, checkpoint, dataset, test_env, config, checkpoint.meta.seed)?);
    }
    if checkpoint.featurizer_checksum() != before {
        return Err(Error::Integrity(format!("featurizer of {} changed during probing", checkpoint.meta.cell())));
    }
    Ok(out)
}

/// Mean probe accuracy for one (algorithm, tap) over held-out envs and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub algorithm: String,
    pub tap_index: usize,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSuite {
    pub raw: Vec<ProbeResult>,
    pub grid: Vec<GridCell>,
}

/// Averages raw results into the (algorithm x tap) grid, in first-seen algorithm order.
pub fn accuracy_grid(raw: &[ProbeResult]) -> Vec<GridCell> {
    let mut grid: Vec<GridCell> = Vec::new();
    for r in raw {
        match grid.iter_mut().find(|g| g.algorithm == r.algorithm && g.tap_index == r.tap_index) {
            Some(g) => {
                g.accuracy += r.accuracy;
                g.count += 1;
            }
            None => grid.push(GridCell { algorithm: r.algorithm.clone(), tap_index: r.tap_index, accuracy: r.accuracy, count: 1 }),
        }
    }
    grid.iter_mut().for_each(|g| g.accuracy /= g.count as f64);
    grid.sort_by(|a, b| {
        let rank = |name: &str| raw.iter().position(|r| r.algorithm == name);
        rank(&a.algorithm).cmp(&rank(&b.algorithm)).then(a.tap_index.cmp(&b.tap_index))
    });
    grid
}

/// Probes every expected cell. `workers` checkpoints are processed concurrently.
pub fn run_probing_suite(
    checkpoints: &[Checkpoint],
    dataset: &EnvironmentDataset,
    cells: &[CellKey],
    config: &ProbeConfig,
    workers: usize,
) -> Result<ProbeSuite> {
    config.validate()?;
    let mut chosen = Vec::with_capacity(cells.len());
    let mut missing = Vec::new();
    for cell in cells {
        match checkpoints.iter().find(|c| c.meta.cell() == *cell) {
            Some(c) => chosen.push(c),
            None => missing.push(cell.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Vec<ProbeResult>>>>> = Mutex::new((0..chosen.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, chosen.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= chosen.len() {
                    break;
                }
                let r = probe_checkpoint(chosen[i], dataset, config);
                slots.lock().expect("probe worker panicked")[i] = Some(r);
            });
        }
    });
    let mut raw = Vec::new();
    for r in slots.into_inner().expect("probe worker panicked") {
        raw.extend(r.expect("every slot is filled")?);
    }
    let grid = accuracy_grid(&raw);
    Ok(ProbeSuite { raw, grid })
}
