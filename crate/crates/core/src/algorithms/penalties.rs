//! Per-environment objectives and their gradients.
//!
//! Each function takes one tensor per environment and returns the value
//! together with one gradient tensor per environment (same shapes).

use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::nn::ops::{cross_entropy, softmax_rows};
use crate::nn::{Scalar, Tensor};
use crate::rng::Rng;

fn split_rows<T: Scalar>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = t.slice_rows(start, start + n);
            start += n;
            part
        })
        .collect()
}

fn check_envs<T>(what: &str, parts: &[&Tensor<T>], min: usize) -> Result<()> {
    if parts.len() < min {
        return Err(Error::InvalidArgument(format!("{what} needs at least {min} environment(s), got {}", parts.len())));
    }
    Ok(())
}

/// Cross-entropy of the concatenated environments.
pub fn erm_loss<T: Scalar>(logits: &[&Tensor<T>], labels: &[&[usize]]) -> Result<(T, Vec<Tensor<T>>)> {
    check_envs("erm_loss", logits, 1)?;
    if labels.len() != logits.len() {
        return Err(Error::dim("erm_loss", "environments", logits.len(), labels.len()));
    }
    let all = Tensor::concat_rows(logits)?;
    let ys: Vec<usize> = labels.iter().flat_map(|l| l.iter().copied()).collect();
    let (loss, grad) = cross_entropy(&all, &ys)?;
    let sizes: Vec<usize> = logits.iter().map(|t| t.shape()[0]).collect();
    Ok((loss, split_rows(&grad, &sizes)?))
}

/// Mean cross-entropy of each environment separately, with gradients.
pub fn per_env_risks<T: Scalar>(logits: &[&Tensor<T>], labels: &[&[usize]]) -> Result<(Vec<T>, Vec<Tensor<T>>)> {
    if labels.len() != logits.len() {
        return Err(Error::dim("per_env_risks", "environments", logits.len(), labels.len()));
    }
    let mut risks = Vec::with_capacity(logits.len());
    let mut grads = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(labels) {
        let (l, g) = cross_entropy(z, y)?;
        risks.push(l);
        grads.push(g);
    }
    Ok((risks, grads))
}

/// Derivative of `CE(w * z, y)` with respect to the scalar `w` at `w = 1`.
pub fn irm_scale_gradient<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (_, ce_grad) = cross_entropy(logits, labels)?;
    // ce_grad = (p - onehot) / n, so the scale gradient is its inner product with z
    Ok(ce_grad.data().iter().zip(logits.data()).fold(T::zero(), |a, (&c, &v)| a + c * v))
}

/// IRMv1: sum over environments of the squared scale-variable gradient.
pub fn irm_penalty<T: Scalar>(logits: &[&Tensor<T>], labels: &[&[usize]]) -> Result<(T, Vec<Tensor<T>>)> {
    check_envs("irm_penalty", logits, 1)?;
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(labels) {
        let (n, k) = z.dims2("irm_penalty")?;
        if n < 2 {
            return Err(Error::DegenerateStatistics(format!("irm_penalty needs >= 2 samples per environment, got {n}")));
        }
        let (_, ce_grad) = cross_entropy(z, y)?;
        let g: T = ce_grad.data().iter().zip(z.data()).fold(T::zero(), |a, (&c, &v)| a + c * v);
        total += g * g;
        let p = softmax_rows(z)?;
        let inv_n = T::one() / T::of(n as f64);
        let two_g = T::of(2.0) * g;
        let mut dz = vec![T::zero(); n * k];
        for i in 0..n {
            let zr = &z.data()[i * k..(i + 1) * k];
            let pr = &p.data()[i * k..(i + 1) * k];
            let cr = &ce_grad.data()[i * k..(i + 1) * k];
            let zbar = pr.iter().zip(zr).fold(T::zero(), |a, (&pp, &zz)| a + pp * zz);
            for j in 0..k {
                dz[i * k + j] = two_g * (cr[j] + inv_n * pr[j] * (zr[j] - zbar));
            }
        }
        grads.push(Tensor::new(vec![n, k], dz)?);
    }
    Ok((total, grads))
}

/// Population variance of per-environment risks and its gradient per risk.
pub fn vrex_penalty<T: Scalar>(risks: &[T]) -> Result<(T, Vec<T>)> {
    if risks.len() < 2 {
        return Err(Error::DegenerateStatistics(format!("vrex_penalty needs >= 2 environments, got {}", risks.len())));
    }
    let e = T::of(risks.len() as f64);
    let mean = risks.iter().fold(T::zero(), |a, &r| a + r) / e;
    let var = risks.iter().fold(T::zero(), |a, &r| a + (r - mean) * (r - mean)) / e;
    let grads = risks.iter().map(|&r| T::of(2.0) * (r - mean) / e).collect();
    Ok((var, grads))
}

/// Exponentiated-gradient update of the group weights (in log space) and the
/// loss re-weighted by the updated weights.
pub fn groupdro_reweight(q: &[f64], losses: &[f64], eta: f64) -> Result<(Vec<f64>, f64)> {
    if q.len() != losses.len() || q.is_empty() {
        return Err(Error::dim("groupdro_reweight", "environments", q.len(), losses.len()));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || q.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::State(format!("group weights {q:?} are not a probability vector (sum {sum})")));
    }
    let logits: Vec<f64> = q.iter().zip(losses).map(|(&w, &l)| w.ln() + eta * l).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    let updated: Vec<f64> = unnorm.iter().map(|&v| v / z).collect();
    let loss = updated.iter().zip(losses).map(|(w, l)| w * l).sum();
    Ok((updated, loss))
}

struct Moments {
    n: usize,
    d: usize,
    mean: Vec<f64>,
    /// Row-major D x D biased covariance.
    cov: Vec<f64>,
}

fn moments<T: Scalar>(x: &Tensor<T>) -> Result<Moments> {
    let (n, d) = x.dims2("coral_penalty")?;
    if n < 2 {
        return Err(Error::DegenerateStatistics(format!("coral_penalty needs >= 2 samples per environment, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v.as_f64());
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for row in x.data().chunks(d) {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v.as_f64() - m).collect();
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += c[a] * c[b];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n as f64);
    Ok(Moments { n, d, mean, cov })
}

/// Mean over environment pairs of squared mean difference plus squared
/// Frobenius distance of biased covariances. Statistics run at 64-bit.
pub fn coral_penalty<T: Scalar>(features: &[&Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)> {
    check_envs("coral_penalty", features, 2)?;
    let stats: Vec<Moments> = features.iter().map(|f| moments(f)).collect::<Result<_>>()?;
    let d = stats[0].d;
    if let Some(s) = stats.iter().find(|s| s.d != d) {
        return Err(Error::dim("coral_penalty", "features", d, s.d));
    }
    let pairs = features.len() * (features.len() - 1) / 2;
    let scale = 1.0 / pairs as f64;
    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = stats.iter().map(|s| vec![0.0; s.n * d]).collect();
    for a in 0..features.len() {
        for b in a + 1..features.len() {
            let dmu: Vec<f64> = stats[a].mean.iter().zip(&stats[b].mean).map(|(x, y)| x - y).collect();
            let dcov: Vec<f64> = stats[a].cov.iter().zip(&stats[b].cov).map(|(x, y)| x - y).collect();
            value += scale * (dmu.iter().map(|v| v * v).sum::<f64>() + dcov.iter().map(|v| v * v).sum::<f64>());
            for (env, sign) in [(a, 1.0), (b, -1.0)] {
                let s = &stats[env];
                let n = s.n as f64;
                for (i, row) in features[env].data().chunks(d).enumerate() {
                    let c: Vec<f64> = row.iter().zip(&s.mean).map(|(v, m)| v.as_f64() - m).collect();
                    let g = &mut grads[env][i * d..(i + 1) * d];
                    for p in 0..d {
                        let dc: f64 = (0..d).map(|q| dcov[p * d + q] * c[q]).sum();
                        g[p] += sign * scale * (2.0 / n * dmu[p] + 4.0 / n * dc);
                    }
                }
            }
        }
    }
    let grads = grads
        .into_iter()
        .zip(&stats)
        .map(|(g, s)| Tensor::new(vec![s.n, d], g.into_iter().map(T::of).collect()))
        .collect::<Result<_>>()?;
    Ok((T::of(value), grads))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over environment pairs of the biased Gaussian-kernel MMD^2.
pub fn mmd_penalty<T: Scalar>(features: &[&Tensor<T>], gamma: f64) -> Result<(T, Vec<Tensor<T>>)> {
    check_envs("mmd_penalty", features, 2)?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("mmd kernel gamma {gamma} must be positive")));
    }
    let rows: Vec<Vec<Vec<f64>>> = features
        .iter()
        .map(|f| {
            let (_, d) = f.dims2("mmd_penalty")?;
            Ok(f.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
        })
        .collect::<Result<_>>()?;
    let d = features[0].shape()[1];
    if let Some(f) = features.iter().find(|f| f.shape()[1] != d) {
        return Err(Error::dim("mmd_penalty", "features", d, f.shape()[1]));
    }
    let pairs = features.len() * (features.len() - 1) / 2;
    let scale = 1.0 / pairs as f64;
    let mut grads: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.len() * d]).collect();
    let mut value = 0.0;
    // Adds w * mean_{i,j} k(x_i, y_j) and its gradient into (gx, gy).
    let cross = |x: usize, y: usize, w: f64, value: &mut f64, grads: &mut Vec<Vec<f64>>| {
        let (xs, ys) = (&rows[x], &rows[y]);
        let norm = w / (xs.len() * ys.len()) as f64;
        for (i, xi) in xs.iter().enumerate() {
            for (j, yj) in ys.iter().enumerate() {
                let k = (-gamma * sq_dist(xi, yj)).exp();
                *value += norm * k;
                let c = -2.0 * gamma * k * norm;
                for p in 0..d {
                    let diff = xi[p] - yj[p];
                    grads[x][i * d + p] += c * diff;
                    grads[y][j * d + p] -= c * diff;
                }
            }
        }
    };
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            cross(a, a, scale, &mut value, &mut grads);
            cross(b, b, scale, &mut value, &mut grads);
            cross(a, b, -2.0 * scale, &mut value, &mut grads);
        }
    }
    let grads = grads
        .into_iter()
        .zip(&rows)
        .map(|(g, r)| Tensor::new(vec![r.len(), d], g.into_iter().map(T::of).collect()))
        .collect::<Result<_>>()?;
    Ok((T::of(value.max(0.0)), grads))
}

/// A convex combination of two minibatches with both label sets kept.
#[derive(Clone, Debug)]
pub struct MixedBatch<T> {
    pub images: Tensor<T>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub lambda: f64,
}

impl<T: Scalar> MixedBatch<T> {
    /// Soft targets `lambda * onehot(a) + (1 - lambda) * onehot(b)`.
    pub fn targets(&self, classes: usize) -> Result<Tensor<T>> {
        let n = self.labels_a.len();
        let mut t = vec![T::zero(); n * classes];
        for (i, (&a, &b)) in self.labels_a.iter().zip(&self.labels_b).enumerate() {
            if a >= classes || b >= classes {
                return Err(Error::Label { index: i, label: a.max(b), classes });
            }
            t[i * classes + a] += T::of(self.lambda);
            t[i * classes + b] += T::of(1.0 - self.lambda);
        }
        Tensor::new(vec![n, classes], t)
    }
}

/// Mixes with a fixed `lambda`.
pub fn mixup_with<T: Scalar>(
    a: (&Tensor<T>, &[usize]),
    b: (&Tensor<T>, &[usize]),
    lambda: f64,
) -> Result<MixedBatch<T>> {
    if a.0.shape() != b.0.shape() {
        return Err(Error::dim("mixup", "batch", format!("{:?}", a.0.shape()), format!("{:?}", b.0.shape())));
    }
    if a.1.len() != b.1.len() || a.1.len() != a.0.shape()[0] {
        return Err(Error::dim("mixup", "labels", a.0.shape()[0], b.1.len()));
    }
    let (l, r) = (T::of(lambda), T::of(1.0 - lambda));
    let data = a.0.data().iter().zip(b.0.data()).map(|(&x, &y)| l * x + r * y).collect();
    Ok(MixedBatch {
        images: Tensor::new(a.0.shape().to_vec(), data)?,
        labels_a: a.1.to_vec(),
        labels_b: b.1.to_vec(),
        lambda,
    })
}

/// Draws `lambda ~ Beta(alpha, alpha)` and mixes.
pub fn mixup_minibatches<T: Scalar>(
    a: (&Tensor<T>, &[usize]),
    b: (&Tensor<T>, &[usize]),
    alpha: f64,
    rng: &mut Rng,
) -> Result<MixedBatch<T>> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    let mut lambda: f64 = beta.sample(rng);
    if !lambda.is_finite() {
        lambda = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    }
    mixup_with(a, b, lambda)
}

/// Keeps the mean gradient where the per-environment signs agree at least
/// `tau`, zero elsewhere.
pub fn andmask_aggregate<T: Scalar>(grads: &[&[T]], tau: f64) -> Result<Vec<T>> {
    let Some(first) = grads.first() else {
        return Err(Error::InvalidArgument("andmask needs at least one environment".into()));
    };
    if let Some(g) = grads.iter().find(|g| g.len() != first.len()) {
        return Err(Error::dim("andmask_aggregate", "gradient", first.len(), g.len()));
    }
    let e = grads.len() as f64;
    Ok((0..first.len())
        .map(|j| {
            let mut sum = T::zero();
            let mut signs = 0.0;
            for g in grads {
                sum += g[j];
                signs += if g[j] > T::zero() {
                    1.0
                } else if g[j] < T::zero() {
                    -1.0
                } else {
                    0.0
                };
            }
            if (signs / e).abs() >= tau {
                sum / T::of(e)
            } else {
                T::zero()
            }
        })
        .collect())
}
