//! Trains a small ERM featurizer, freezes it, and fits a linear probe per tap
//! to recover which training environment each image came from. A
//! shuffled-label control probe is fitted alongside.

use oodprobe::algorithms::{train_algorithm, Algorithm, AlgorithmConfig};
use oodprobe::data::{build_rotated, synth_glyphs};
use oodprobe::featurizers::FeaturizerSpec;
use oodprobe::probing::{attach_probes, dummy_accuracy, train_probe, ProbeConfig};

fn main() -> oodprobe::Result<()> {
    let base = synth_glyphs(0, 100)?;
    let data = build_rotated(&base, &[0.0, 15.0, 30.0, 45.0, 60.0, 75.0], 400, 0)?;
    let spec = FeaturizerSpec::mini_cnn_with([1, 28, 28], [8, 16, 16, 16]);
    let config = AlgorithmConfig { steps: 300, batch_size: 8, eval_interval: 300, checkpoint_every: 300, ..AlgorithmConfig::new(Algorithm::Erm) };
    let test_env = 0;
    let run = train_algorithm(&config, &spec, &data, test_env, 0)?;
    let ckpt = run.final_checkpoint();
    let m = data.num_envs() - 1;
    println!("dummy accuracy {:.3}", dummy_accuracy(m)?);
    for probe in attach_probes(ckpt, m)? {
        let mut fitted = probe.clone();
        let real = train_probe(&mut fitted, ckpt, &data, test_env, &ProbeConfig::default(), 0)?;
        let mut shuffled = probe.clone();
        let control = train_probe(&mut shuffled, ckpt, &data, test_env, &ProbeConfig { control: true, ..Default::default() }, 0)?;
        println!(
            "probe {} ({} inputs): acc {:.3}  control {:.3}  after {} samples",
            real.tap_index,
            probe.input_dim(),
            real.accuracy,
            control.accuracy,
            real.samples_used
        );
    }
    Ok(())
}
