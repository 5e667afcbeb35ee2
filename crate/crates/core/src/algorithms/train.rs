use rand::seq::SliceRandom;

use crate::algorithms::penalties::{
    andmask_aggregate, coral_penalty, erm_loss, groupdro_reweight, irm_penalty, mixup_minibatches, mmd_penalty,
    per_env_risks, vrex_penalty,
};
use crate::algorithms::{Algorithm, AlgorithmConfig};
use crate::data::{EnvironmentDataset, LabeledImages};
use crate::error::{Error, Result};
use crate::featurizers::{Checkpoint, CheckpointMeta, FeaturizerSpec, Network};
use crate::metrics::{CellKey, Metric, MetricRecord, Split};
use crate::nn::ops::{argmax_rows, cross_entropy, soft_cross_entropy};
use crate::nn::{optimizer_step, Mode, Tensor, UpdateRule};
use crate::rng::{rng_from, tag, Rng};

/// Everything one training cell produces.
#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Intermediate checkpoints in step order; the last one is final.
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricRecord>,
    /// Total objective at every step.
    pub objective: Vec<f64>,
    /// Accuracy on the held-out environment's out-split, Perf(f_g).
    pub test_accuracy: f64,
}

impl TrainRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("a run always ends with a checkpoint")
    }
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode `(accuracy, mean cross-entropy)` over a labeled set.
pub fn evaluate(net: &Network, data: &LabeledImages) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let logits = net.predict(&data.images.slice_rows(start, end)?)?;
        let labels = &data.labels[start..end];
        let (l, _) = cross_entropy(&logits, labels)?;
        loss += l as f64 * (end - start) as f64;
        correct += argmax_rows(&logits)?.iter().zip(labels).filter(|(p, y)| p == y).count();
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

/// Endless reshuffled pass over one environment's in-split.
struct Sampler<'a> {
    data: &'a LabeledImages,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Sampler<'a> {
    fn new(data: &'a LabeledImages) -> Self {
        Sampler { data, order: (0..data.len()).collect(), pos: data.len() }
    }

    fn next(&mut self, n: usize, rng: &mut Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
        if self.pos + n > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + n];
        self.pos += n;
        Ok((self.data.images.select_rows(idx)?, idx.iter().map(|&i| self.data.labels[i]).collect()))
    }
}

fn concat_f32(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn split_rows(t: &Tensor<f32>, n: usize, parts: usize) -> Result<Vec<Tensor<f32>>> {
    (0..parts).map(|e| t.slice_rows(e * n, (e + 1) * n)).collect()
}

struct Step<'a> {
    config: &'a AlgorithmConfig,
    classes: usize,
    q: Vec<f64>,
    mix_rng: Rng,
}

impl Step<'_> {
    /// Accumulates gradients for one step and returns the objective.
    fn run(&mut self, net: &mut Network, step: usize, batches: &[(Tensor<f32>, Vec<usize>)]) -> Result<f64> {
        let envs = batches.len();
        let n = batches[0].1.len();
        let weight = self.config.penalty_weight(step);
        net.zero_grad();
        match self.config.algorithm {
            Algorithm::AndMask => {
                let mut per_env: Vec<Vec<Vec<f32>>> = Vec::with_capacity(envs);
                let mut total = 0.0;
                for (x, y) in batches {
                    net.zero_grad();
                    let (logits, _) = net.forward(x, Mode::Train)?;
                    let (loss, g) = cross_entropy(&logits, y)?;
                    net.backward(&g, None)?;
                    total += loss as f64 / envs as f64;
                    per_env.push(
                        net.params_mut()
                            .iter()
                            .map(|p| p.grad().map(<[f32]>::to_vec).unwrap_or_default())
                            .collect(),
                    );
                }
                for (k, p) in net.params_mut().into_iter().enumerate() {
                    let grads: Vec<&[f32]> = per_env.iter().map(|g| g[k].as_slice()).collect();
                    p.set_grad(andmask_aggregate(&grads, self.config.andmask_tau)?)?;
                }
                Ok(total)
            }
            Algorithm::Mixup => {
                let mut order: Vec<usize> = (0..envs).collect();
                order.shuffle(&mut self.mix_rng);
                let mut images = Vec::with_capacity(envs);
                let mut targets = Vec::with_capacity(envs);
                for k in 0..envs {
                    let (a, b) = (&batches[order[k]], &batches[order[(k + 1) % envs]]);
                    let m = mixup_minibatches((&a.0, &a.1), (&b.0, &b.1), self.config.mixup_alpha, &mut self.mix_rng)?;
                    targets.push(m.targets(self.classes)?);
                    images.push(m.images);
                }
                let (logits, _) = net.forward(&concat_f32(&images)?, Mode::Train)?;
                let (loss, g) = soft_cross_entropy(&logits, &concat_f32(&targets)?)?;
                net.backward(&g, None)?;
                Ok(loss as f64)
            }
            algorithm => {
                let x = concat_f32(&batches.iter().map(|b| b.0.clone()).collect::<Vec<_>>())?;
                let (logits, features) = net.forward(&x, Mode::Train)?;
                let parts = split_rows(&logits, n, envs)?;
                let views: Vec<&Tensor<f32>> = parts.iter().collect();
                let labels: Vec<&[usize]> = batches.iter().map(|b| b.1.as_slice()).collect();
                let penalized = algorithm.is_penalized() && weight > 0.0;

                if algorithm == Algorithm::GroupDro {
                    let (risks, grads) = per_env_risks(&views, &labels)?;
                    let losses: Vec<f64> = risks.iter().map(|&r| r as f64).collect();
                    let (q, loss) = groupdro_reweight(&self.q, &losses, self.config.groupdro_eta)?;
                    self.q = q;
                    let scaled: Vec<Tensor<f32>> = grads
                        .into_iter()
                        .zip(&self.q)
                        .map(|(mut g, &w)| {
                            g.data_mut().iter_mut().for_each(|v| *v *= w as f32);
                            g
                        })
                        .collect();
                    net.backward(&concat_f32(&scaled)?, None)?;
                    return Ok(loss);
                }

                let (erm, mut dlogits) = erm_loss(&views, &labels)?;
                let mut objective = erm as f64;
                let mut dfeatures = None;
                if penalized {
                    let w = weight as f32;
                    match algorithm {
                        Algorithm::Irm => {
                            let (p, g) = irm_penalty(&views, &labels)?;
                            objective += weight * p as f64;
                            add_scaled(&mut dlogits, &g, w);
                        }
                        Algorithm::Vrex => {
                            let (risks, rgrads) = per_env_risks(&views, &labels)?;
                            let (p, dr) = vrex_penalty(&risks)?;
                            objective += weight * p as f64;
                            for ((d, g), r) in dlogits.iter_mut().zip(&rgrads).zip(dr) {
                                d.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += w * r * b);
                            }
                        }
                        Algorithm::Coral | Algorithm::Mmd => {
                            let fparts = split_rows(&features, n, envs)?;
                            let fviews: Vec<&Tensor<f32>> = fparts.iter().collect();
                            let (p, mut g) = if algorithm == Algorithm::Coral {
                                coral_penalty(&fviews)?
                            } else {
                                let gamma = self.config.mmd_gamma.unwrap_or(1.0 / features.shape()[1] as f64);
                                mmd_penalty(&fviews, gamma)?
                            };
                            objective += weight * p as f64;
                            g.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= w));
                            dfeatures = Some(concat_f32(&g)?);
                        }
                        _ => unreachable!("only penalized algorithms reach here"),
                    }
                }
                net.backward(&concat_f32(&dlogits)?, dfeatures.as_ref())?;
                Ok(objective)
            }
        }
    }
}

fn add_scaled(dst: &mut [Tensor<f32>], src: &[Tensor<f32>], w: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += w * b);
    }
}

/// Trains on the in-splits of every environment except `test_env`.
pub fn train_algorithm(
    config: &AlgorithmConfig,
    featurizer: &FeaturizerSpec,
    dataset: &EnvironmentDataset,
    test_env: usize,
    seed: u64,
) -> Result<TrainRun> {
    config.validate()?;
    let train_envs = dataset.training_envs(test_env)?;
    if train_envs.is_empty() {
        return Err(Error::Protocol("no training environments remain after holding one out".into()));
    }
    if featurizer.input_shape != dataset.image_shape() {
        return Err(Error::dim("train_algorithm", "input_shape", format!("{:?}", featurizer.input_shape), format!("{:?}", dataset.image_shape())));
    }
    let splits = dataset.splits()?;
    let classes = dataset.num_classes();
    let mut net = Network::build(featurizer, classes, seed)?;
    let batch = train_envs
        .iter()
        .map(|&e| splits[e].in_split.len())
        .min()
        .unwrap_or(0)
        .min(config.batch_size);
    if (config.algorithm == Algorithm::Irm || config.algorithm == Algorithm::Coral)
        && batch < 2 {
            return Err(Error::DegenerateStatistics(format!("{} needs >= 2 samples per environment batch", config.algorithm)));
        }
    let key = CellKey {
        algorithm: config.algorithm.name().to_string(),
        dataset: dataset.name.clone(),
        test_env,
        seed,
    };
    let meta = |step| CheckpointMeta {
        algorithm: key.algorithm.clone(),
        dataset: key.dataset.clone(),
        test_env,
        seed,
        step,
    };

    let mut samplers: Vec<Sampler> = train_envs.iter().map(|&e| Sampler::new(&splits[e].in_split)).collect();
    let mut rng = rng_from(seed, &[tag("batches")]);
    let mut stepper = Step {
        config,
        classes,
        q: vec![1.0 / train_envs.len() as f64; train_envs.len()],
        mix_rng: rng_from(seed, &[tag("mixup")]),
    };
    let rule = UpdateRule::adam(config.lr);
    let mut run = TrainRun { checkpoints: Vec::new(), metrics: Vec::new(), objective: Vec::with_capacity(config.steps), test_accuracy: 0.0 };

    for step in 0..config.steps {
        let batches = samplers.iter_mut().map(|s| s.next(batch, &mut rng)).collect::<Result<Vec<_>>>()?;
        let objective = stepper.run(&mut net, step, &batches)?;
        if !objective.is_finite() {
            return Err(Error::TrainingFailure { step, reason: format!("objective became {objective}") });
        }
        optimizer_step(&mut net.params_mut(), &rule)?;
        run.objective.push(objective);

        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.steps {
            let mut eval = |split, sets: Vec<&LabeledImages>| -> Result<f64> {
                let (mut acc, mut loss) = (0.0, 0.0);
                for s in &sets {
                    let (a, l) = evaluate(&net, s)?;
                    acc += a / sets.len() as f64;
                    loss += l / sets.len() as f64;
                }
                run.metrics.push(key.record(done, split, Metric::Acc, acc));
                run.metrics.push(key.record(done, split, Metric::Loss, loss));
                Ok(acc)
            };
            eval(Split::In, train_envs.iter().map(|&e| &splits[e].in_split).collect())?;
            eval(Split::Out, train_envs.iter().map(|&e| &splits[e].out_split).collect())?;
            run.test_accuracy = eval(Split::Test, vec![&splits[test_env].out_split])?;
        }
        if done % config.checkpoint_every == 0 || done == config.steps {
            if !net.params_finite() {
                return Err(Error::TrainingFailure { step, reason: "non-finite parameters".into() });
            }
            run.checkpoints.push(Checkpoint::new(net.clone(), meta(done)));
        }
    }
    Ok(run)
}
