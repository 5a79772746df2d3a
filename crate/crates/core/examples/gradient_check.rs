//! Analytic against central-difference gradients of the full training
//! objective, for every parameter under a path prefix.
//!
//! ```text
//! cargo run --release --example gradient_check -- [prefix] [seed]
//! ```
//!
//! An empty prefix checks the whole micro model (several minutes).

use gridformer::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let prefix = args.next().unwrap_or_else(|| "tail".into());
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let cfg = GradcheckConfig {
        seed,
        prefix: (!prefix.is_empty()).then_some(prefix),
        ..GradcheckConfig::default()
    };
    println!("{:<44} {:>6} {:>10} {:>10}", "parameter", "n", "max rel", "max abs");
    let report = run_gradcheck(&cfg, |p| {
        println!("{:<44} {:>6} {:>10.2e} {:>10.2e}", p.path, p.numel, p.max_rel_err, p.max_abs_diff);
    })?;
    println!(
        "loss {:.6}; {} scalars, {} failures, {:.1}s",
        report.loss,
        report.elements(),
        report.failures(),
        report.elapsed.as_secs_f64()
    );
    Ok(())
}
