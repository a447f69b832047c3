//! Central finite differences against every hand-written backward pass,
//! plus one whole-model probe on the tiny configuration.

use dfcr::model::ModelConfig;
use dfcr::train::{grad_check, model_probe, operator_suite, GradCheckOptions};

fn main() -> dfcr::Result<()> {
    let instances = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let opts = GradCheckOptions::default();
    let mut report = grad_check(&operator_suite(instances, 1), &opts);
    let probe = model_probe(&ModelConfig::tiny(), 1)?;
    report.merge(grad_check(&[Box::new(probe)], &GradCheckOptions { tolerance: 1e-2, ..opts }));
    print!("{report}");
    println!("{}", if report.passed() { "all gradients agree" } else { "mismatch found" });
    Ok(())
}
