use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{EnvParam, EnvironmentDataset, LabeledImages, SplitPair};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{rng_from, tag, Rng};

/// Rotates every channel of one `C x H x W` image by `degrees` (counter-clockwise
/// on screen) about the pixel-grid center, bilinear with zero fill.
pub fn rotate_image(src: &[f32], channels: usize, h: usize, w: usize, degrees: f64) -> Vec<f32> {
    if degrees == 0.0 {
        return src.to_vec();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse map: destination -> source
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for c in 0..channels {
                let plane = &src[c * h * w..(c + 1) * h * w];
                let mut v = 0.0;
                for &(tx, ty, wt) in &taps {
                    if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                        v += wt * plane[ty as usize * w + tx as usize] as f64;
                    }
                }
                out[c * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn sample_env(base: &LabeledImages, per_env_n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if per_env_n == 0 || per_env_n > base.len() {
        return Err(Error::Sampling(format!(
            "cannot draw {per_env_n} images without replacement from {}",
            base.len()
        )));
    }
    Ok(sample(rng, base.len(), per_env_n).into_vec())
}

/// One environment per angle; each draws `per_env_n` base images without
/// replacement and rotates them.
pub fn build_rotated(base: &LabeledImages, angles: &[f64], per_env_n: usize, seed: u64) -> Result<EnvironmentDataset> {
    if angles.is_empty() {
        return Err(Error::InvalidArgument("angle list is empty".into()));
    }
    let [c, h, w] = base.image_shape();
    let px = c * h * w;
    let mut envs = Vec::with_capacity(angles.len());
    for (e, &angle) in angles.iter().enumerate() {
        let mut rng = rng_from(seed, &[tag("rotated"), e as u64]);
        let idx = sample_env(base, per_env_n, &mut rng)?;
        let mut data = Vec::with_capacity(per_env_n * px);
        for &i in &idx {
            data.extend(rotate_image(&base.images.data()[i * px..(i + 1) * px], c, h, w, angle));
        }
        envs.push(LabeledImages::new(
            Tensor::new(vec![per_env_n, c, h, w], data)?,
            idx.iter().map(|&i| base.labels[i]).collect(),
            base.num_classes,
        )?);
    }
    let params = angles.iter().map(|&a| EnvParam::RotationDegrees(a)).collect();
    EnvironmentDataset::new("rotated_digits", envs, params, 0.2, seed)
}

fn check_probability(name: &str, p: f64, hi: f64) -> Result<()> {
    if !(0.0..=hi).contains(&p) {
        return Err(Error::InvalidArgument(format!("{name} = {p} not in [0, {hi}]")));
    }
    Ok(())
}

/// Binary digit<5 task with label noise; the grayscale lands in the channel
/// matching the noisy label with probability `correlations[e]`.
pub fn build_colored(
    base: &LabeledImages,
    correlations: &[f64],
    label_noise: f64,
    per_env_n: usize,
    seed: u64,
) -> Result<EnvironmentDataset> {
    if correlations.is_empty() {
        return Err(Error::InvalidArgument("correlation list is empty".into()));
    }
    correlations
        .iter()
        .try_for_each(|&p| check_probability("correlation", p, 1.0))?;
    check_probability("label_noise", label_noise, 0.5)?;
    let [c, h, w] = base.image_shape();
    if c != 1 {
        return Err(Error::dim("build_colored", "C", 1, c));
    }
    let px = h * w;
    let mut envs = Vec::with_capacity(correlations.len());
    for (e, &corr) in correlations.iter().enumerate() {
        let mut rng = rng_from(seed, &[tag("colored"), e as u64]);
        let idx = sample_env(base, per_env_n, &mut rng)?;
        let mut data = vec![0f32; per_env_n * 2 * px];
        let mut labels = Vec::with_capacity(per_env_n);
        for (k, &i) in idx.iter().enumerate() {
            let mut label = usize::from(base.labels[i] >= 5);
            if rng.gen_bool(label_noise) {
                label ^= 1;
            }
            let channel = if rng.gen_bool(1.0 - corr) { label ^ 1 } else { label };
            let dst = (2 * k + channel) * px;
            data[dst..dst + px].copy_from_slice(&base.images.data()[i * px..(i + 1) * px]);
            labels.push(label);
        }
        envs.push(LabeledImages::new(Tensor::new(vec![per_env_n, 2, h, w], data)?, labels, 2)?);
    }
    let params = correlations.iter().map(|&p| EnvParam::ColorCorrelation(p)).collect();
    EnvironmentDataset::new("colored_digits", envs, params, 0.2, seed)
}

/// Seeded permutation; the last `ceil(fraction * N)` entries form the out-split.
pub fn split_in_out(env: &LabeledImages, fraction: f64, seed: u64) -> Result<SplitPair> {
    let n = env.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 items to split, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} not in (0, 1)")));
    }
    // guard against 0.2 * 10 landing a hair above 2
    let out = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from(seed, &[tag("split")]));
    let out_indices = perm.split_off(n - out);
    Ok(SplitPair {
        in_split: env.select(&perm)?,
        out_split: env.select(&out_indices)?,
        in_indices: perm,
        out_indices,
    })
}
