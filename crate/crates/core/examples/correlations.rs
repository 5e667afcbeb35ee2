//! Correlates probe accuracy with held-out accuracy on a synthetic results
//! table, after dropping algorithms that disagree with a reference.

use std::collections::BTreeMap;

use oodprobe::analysis::{filter_3sigma, layerwise_correlation, pearson, Reference, ResultRow, ResultsTable};
use oodprobe::metrics::CellKey;

fn main() -> oodprobe::Result<()> {
    let algorithms = ["ERM", "IRM", "VREx", "CORAL", "MMD", "Broken"];
    let mut table = ResultsTable::new();
    for (i, a) in algorithms.iter().enumerate() {
        for env in 0..3 {
            let probe0 = 0.9 - 0.05 * i as f64 + 0.01 * env as f64;
            let gen = if *a == "Broken" { 0.2 } else { 1.3 - 0.5 * probe0 };
            table.insert(ResultRow {
                cell: CellKey { algorithm: a.to_string(), dataset: "toy".into(), test_env: env, seed: 0 },
                gen_acc: gen,
                probe_accs: vec![probe0, 0.5 + 0.01 * i as f64, 0.4],
            })?;
        }
    }
    let reference: BTreeMap<String, Reference> =
        algorithms.iter().map(|a| (a.to_string(), Reference { mean: 0.9, std: 0.03 })).collect();
    let outcome = filter_3sigma(&table.gen_means("toy"), &reference)?;
    println!("removed by the 3-sigma filter: {:?}", outcome.removed);
    let report = layerwise_correlation(&table, "toy", Some(&outcome.retained))?;
    for e in &report.entries {
        match &e.value {
            Some(c) => println!("tap {}: r = {:+.3}, p = {:.4} {}", e.tap, c.r, c.p, c.stars()),
            None => println!("tap {}: N/A ({})", e.tap, e.note.as_deref().unwrap_or("")),
        }
    }
    let c = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.1, 1.9, 3.2, 3.9])?;
    println!("direct: r = {:.4}, p = {:.4}, n = {}", c.r, c.p, c.n);
    Ok(())
}
