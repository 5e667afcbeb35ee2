//! Finite-difference check of the hand-written backward passes on random
//! small conv/BN/residual/linear stacks, in 64-bit.

use oodprobe::nn::grad_check_suite;

fn main() -> oodprobe::Result<()> {
    let results = grad_check_suite(24, 1)?;
    for (case, report) in &results {
        println!("seed {:>20}  layers {:>2}  max rel err {:.2e}", case.seed, case.specs.len(), report.max_rel_error);
    }
    let worst = results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    println!("worst {worst:.2e}");
    Ok(())
}
