//! The full train -> probe -> report -> dump cycle on a reduced config, in a
//! temporary directory. Rerunning any stage skips finished work.

use oodprobe::runner::{cmd_dump, cmd_probe, cmd_report, cmd_train, Experiment, ExperimentConfig};

fn main() -> oodprobe::Result<()> {
    let out = std::env::temp_dir().join("oodprobe-pipeline");
    let config = ExperimentConfig::from_toml(&format!(
        r#"
out_dir = "{}"
[dataset]
glyphs_per_class = 40
per_env_n = 200
[featurizer]
channels = [4, 8, 8, 8]
[train]
algorithms = ["ERM", "CORAL"]
steps = 100
batch_size = 8
anneal_step = 25
eval_interval = 50
checkpoint_every = 50
[probe]
budget = 300
control = true
"#,
        out.display()
    ))?;
    let exp = Experiment::new(config, std::path::Path::new("."))?;
    let t = cmd_train(&exp)?;
    println!("trained {}, skipped {}, failed {}", t.trained.len(), t.skipped.len(), t.failed.len());
    let p = cmd_probe(&exp)?;
    println!("probed {} taps, skipped {}", p.probed.len(), p.skipped.len());
    for f in cmd_report(&exp)?.files {
        println!("report {}", f.display());
    }
    println!("dumped {} images", cmd_dump(&exp, 3, 0)?.len());
    Ok(())
}
