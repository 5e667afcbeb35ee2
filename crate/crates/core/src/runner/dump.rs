use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::featurizers::Checkpoint;
use crate::nn::Tensor;
use crate::rng::{rng_from, tag};

/// Binary greyscale PGM, min-max normalized; a constant image is mid-grey.
pub fn write_pgm(path: &Path, pixels: &[f32], height: usize, width: usize) -> Result<()> {
    let (lo, hi) = pixels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 128 }));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// For every spatial tap and input, writes one seeded-random channel as a
/// PGM named `tap{t}_{stage}_in{i}_ch{c}.pgm`. Flat taps are skipped.
pub fn dump_representations(checkpoint: &Checkpoint, images: &Tensor<f32>, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (_, taps) = checkpoint.network.forward_with_taps(images)?;
    let mut written = Vec::new();
    for (point, rep) in checkpoint.network.taps().iter().zip(&taps) {
        if !point.is_spatial() {
            continue;
        }
        let (n, c, h, w) = rep.dims4("dump")?;
        let mut rng = rng_from(seed, &[tag("dump"), point.index as u64]);
        for i in 0..n {
            let ch = rng.gen_range(0..c);
            let start = (i * c + ch) * h * w;
            let path = out_dir.join(format!("tap{}_{}_in{i}_ch{ch}.pgm", point.index, point.stage));
            write_pgm(&path, &rep.data()[start..start + h * w], h, w)?;
            written.push(path);
        }
    }
    Ok(written)
}
