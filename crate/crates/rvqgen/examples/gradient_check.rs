//! Audits every parameter block's analytic gradient against central
//! finite differences (f64, step 1e-4) on the micro model.
//!
//!     cargo run --release --example gradient_check

use rvqgen::codec::{synthesize_codes, Utterance};
use rvqgen::model::ModelConfig;
use rvqgen::objective::fd_gradient_report;

fn main() {
    let cfg = ModelConfig::micro();
    let items: Vec<Utterance> = [(vec![0u8, 5, 9, 2], 1usize), (vec![7u8, 3, 1, 11], 4)]
        .into_iter()
        .enumerate()
        .map(|(i, (text, style))| {
            let grid = synthesize_codes(&text, style, 1000 + i as u64).unwrap();
            Utterance {
                text,
                style,
                grid: grid.to_rows(),
                seed: 1000 + i as u64,
            }
        })
        .collect();
    let refs: Vec<&Utterance> = items.iter().collect();

    let t0 = std::time::Instant::now();
    let report = fd_gradient_report(&cfg, &refs, 11, 3, 1e-4).unwrap();
    let mut worst = 0.0f64;
    for check in &report {
        worst = worst.max(check.max_rel_err);
        println!(
            "{:<24} coords {}  max_rel_err {:.3e}  max|grad| {:.3e}",
            check.name, check.checked, check.max_rel_err, check.max_grad
        );
    }
    println!(
        "{} blocks, worst relative error {:.3e}, {:.1}s",
        report.len(),
        worst,
        t0.elapsed().as_secs_f64()
    );
    assert!(worst <= 1e-3, "gradient mismatch");
}
