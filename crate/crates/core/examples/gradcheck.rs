//! Verifies every backward rule against central finite differences, then
//! shows the check catching a deliberately broken rule.
//!
//! cargo run --release --example gradcheck

use med::autodiff::OpKind;
use med::gradcheck::{run, GradcheckOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = GradcheckOptions::default();
    println!(
        "{} network at {}x{}",
        opts.spec.variant_name(),
        opts.size,
        opts.size
    );
    let report = run(&opts)?;
    print!("{}", report.render());

    let broken = GradcheckOptions {
        fault: Some(OpKind::BatchNorm),
        ..opts
    };
    let report = run(&broken)?;
    let caught: Vec<&str> = report.failures().iter().map(|r| r.name.as_str()).collect();
    println!(
        "with batch_norm's backward scaled by 1.5, failing checks: {}",
        caught.join(", ")
    );
    Ok(())
}
