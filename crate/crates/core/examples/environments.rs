//! Builds the rotated and coloured digit environments and writes one sample
//! image per environment as PGM.

use oodprobe::data::{build_colored, build_rotated, synth_glyphs};
use oodprobe::runner::write_pgm;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = synth_glyphs(0, 50)?;
    let rotated = build_rotated(&base, &[0.0, 15.0, 30.0, 45.0, 60.0, 75.0], 200, 0)?;
    let colored = build_colored(&base, &[0.9, 0.8, 0.1], 0.25, 200, 0)?;
    let out = std::env::temp_dir().join("oodprobe-environments");
    std::fs::create_dir_all(&out)?;
    for ds in [&rotated, &colored] {
        let [c, h, w] = ds.image_shape();
        println!("{}: {} envs, {} classes, images {c}x{h}x{w}", ds.name, ds.num_envs(), ds.num_classes());
        for (e, (env, param)) in ds.environments.iter().zip(&ds.env_params).enumerate() {
            let split = ds.split(e)?;
            println!("  env {e} {param:?}: {} in / {} out", split.in_split.len(), split.out_split.len());
            // first channel of the first image
            let path = out.join(format!("{}_env{e}.pgm", ds.name));
            write_pgm(&path, &env.images.data()[..h * w], h, w)?;
        }
    }
    println!("samples in {}", out.display());
    Ok(())
}
