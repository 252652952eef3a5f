//! Depth ablation through the experiment harness: EDS5, EDS6, EDS7 and
//! MEDSF on the same noisy image, written as per-variant traces plus
//! summary.csv and curves.csv.
//!
//! cargo run --release --example ablation -- [iterations] [workers]

use med::harness::{cmd_ablate, Overrides};
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(Ok(600), |s| s.parse())?;
    let workers: usize = args.next().map_or(Ok(1), |s| s.parse())?;

    let dir = std::env::temp_dir().join("med-examples/ablation");
    std::fs::create_dir_all(&dir)?;
    let variant = |k: usize, enhancers: &[usize], skip: &str| json!({"generator_depth": k, "enhancer_depths": enhancers, "skip": skip, "base_channels": 4});
    let plan = json!({
        "axis": "depth",
        "task": {
            "kind": "denoise",
            "clean": concat!(env!("CARGO_MANIFEST_DIR"), "/assets/astronaut64.png"),
            "degradation": {"type": "noise", "sigma": 50}
        },
        "fit": {"iterations": iterations, "trace_every": 50},
        "variants": [
            variant(5, &[], "intra"),
            variant(6, &[], "intra"),
            variant(7, &[], "intra"),
            variant(5, &[4, 3], "full")
        ],
        "output_dir": "out"
    });
    let plan_path = dir.join("plan.json");
    std::fs::write(&plan_path, serde_json::to_string_pretty(&plan)?)?;

    let outcome = cmd_ablate(&plan_path, &Overrides::default(), workers)?;
    print!(
        "{}",
        std::fs::read_to_string(outcome.plan.output_dir.join("summary.csv"))?
    );
    println!(
        "curves: {}",
        outcome.plan.output_dir.join("curves.csv").display()
    );
    outcome.ensure_complete()?;
    Ok(())
}
