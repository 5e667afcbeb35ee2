//! Writes a probe-accuracy grid as CSV and an SVG heatmap whose colour scale
//! starts at the dummy accuracy.

use oodprobe::analysis::{grid_csv, grid_svg};
use oodprobe::probing::{dummy_accuracy, GridCell};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut grid = Vec::new();
    for (a, top) in [("ERM", 0.95), ("IRM", 0.9), ("CORAL", 0.8)] {
        for tap in 0..5 {
            grid.push(GridCell { algorithm: a.into(), tap_index: tap, accuracy: top - 0.12 * tap as f64, count: 6 });
        }
    }
    print!("{}", grid_csv(&grid)?);
    let path = std::env::temp_dir().join("oodprobe-grid.svg");
    std::fs::write(&path, grid_svg(&grid, dummy_accuracy(5)?))?;
    println!("heatmap at {}", path.display());
    Ok(())
}
