//! How many samples a linear probe needs for a target accuracy uncertainty,
//! under the finite-hypothesis-class bound.

use oodprobe::probing::{log_class_size, recommend_probe_samples};

fn main() -> oodprobe::Result<()> {
    for (name, inputs) in [("flat 128-d features", 128), ("14x14x16 map", 14 * 14 * 16), ("14x14x64 map", 14 * 14 * 64)] {
        let params = inputs * 5 + 5;
        let lcs = log_class_size(params);
        for eps in [0.05, 0.02, 0.01] {
            let n = recommend_probe_samples(eps, 0.05, lcs)?;
            println!("{name:<20} params {params:>6}  eps {eps:<5} -> {n:>12} samples");
        }
    }
    Ok(())
}
