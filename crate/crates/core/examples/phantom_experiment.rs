//! Runs the phantom experiment and prints per-run and summary results.
//!
//! Optional argument: a JSON file with `ExperimentConfig` overrides.

use ctcbir_core::experiment::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg: ExperimentConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    let result = run_experiment(&cfg, |r| {
        println!(
            "{:<12} seed {} map {:.4} knn {:.4} rr {:?} loss {:?} ({:.1}s)",
            r.arm, r.seed, r.map, r.knn_accuracy, r.relevance_rank, r.final_loss, r.seconds
        )
    })?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
