//! Trains one leave-one-environment-out cell and prints its metrics.
//!
//! cargo run --release --example train_cell -- VREx 0

use oodprobe::algorithms::{train_algorithm, Algorithm, AlgorithmConfig};
use oodprobe::data::{build_rotated, synth_glyphs};
use oodprobe::featurizers::FeaturizerSpec;
use oodprobe::metrics::Metric;

fn main() -> oodprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let algorithm: Algorithm = args.next().as_deref().unwrap_or("ERM").parse()?;
    let test_env: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let base = synth_glyphs(0, 100)?;
    let data = build_rotated(&base, &[0.0, 15.0, 30.0, 45.0, 60.0, 75.0], 400, 0)?;
    let spec = FeaturizerSpec::mini_cnn_with([1, 28, 28], [8, 16, 16, 16]);
    let config = AlgorithmConfig { steps: 400, batch_size: 8, anneal_step: 100, eval_interval: 100, checkpoint_every: 200, ..AlgorithmConfig::new(algorithm) };
    let run = train_algorithm(&config, &spec, &data, test_env, 0)?;
    for r in run.metrics.iter().filter(|r| r.metric == Metric::Acc) {
        println!("step {:>4} {:?} acc {:.3}", r.step, r.split, r.value);
    }
    println!("{algorithm} held-out env {test_env}: {:.3}", run.test_accuracy);
    println!("checkpoints at steps {:?}", run.checkpoints.iter().map(|c| c.meta.step).collect::<Vec<_>>());
    Ok(())
}
