//! Saves and reloads a checkpoint and shows that the featurizer checksum
//! survives the round trip.

use oodprobe::featurizers::{Checkpoint, CheckpointMeta, FeaturizerSpec, Network};

fn main() -> oodprobe::Result<()> {
    let net = Network::build(&FeaturizerSpec::mini_resnet([1, 28, 28]), 10, 3)?;
    let meta = CheckpointMeta { algorithm: "ERM".into(), dataset: "rotated_digits".into(), test_env: 0, seed: 3, step: 0 };
    let ckpt = Checkpoint::new(net, meta);
    let path = std::env::temp_dir().join("oodprobe-example.ckpt");
    ckpt.save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!("{} parameters, {} taps", back.network.param_count(), back.network.taps().len());
    for tap in back.network.taps() {
        println!("  tap {} {} width {}", tap.index, tap.stage, tap.width());
    }
    println!("checksum {}", ckpt.featurizer_checksum());
    println!("reloaded {}", back.featurizer_checksum());
    Ok(())
}
