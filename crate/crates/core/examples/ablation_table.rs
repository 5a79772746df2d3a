//! Parameter and MAC counts of the attention and block ablations.
//!
//! ```text
//! cargo run --release --example ablation_table -- [preset] [size]
//! ```
//!
//! With the full `gridformer` preset at 256 the published figures are shown
//! alongside.

use gridformer::grid::GridConfig;
use gridformer::profile::ablation_table;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "gridformer".into());
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(256);
    let rows = ablation_table(&GridConfig::preset(&preset)?, size, size)?;
    println!(
        "{:<10} {:<14} {:>9} {:>9} {:>11} {:>12}",
        "study", "variant", "params M", "MACs G", "attn MACs G", "reference"
    );
    for r in &rows {
        let reference = r.reference.map_or(String::new(), |(p, m)| format!("{p}M/{m}G"));
        println!(
            "{:<10} {:<14} {:>9.2} {:>9.2} {:>11.2} {:>12}",
            r.study,
            r.variant,
            r.params as f64 / 1e6,
            r.macs as f64 / 1e9,
            r.attention_macs as f64 / 1e9,
            reference
        );
    }
    Ok(())
}
