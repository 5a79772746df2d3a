//! Parameter and MAC breakdown of a preset, and how attention cost grows
//! with the token count.
//!
//! ```text
//! cargo run --release --example profile_complexity -- [preset] [size]
//! ```

use gridformer::autodiff::Tape;
use gridformer::cesa::{compact_attention_macs, naive_token_attention, CetlConfig};
use gridformer::grid::GridConfig;
use gridformer::profile::profile;

fn naive_macs(channels: usize, tokens: usize) -> u64 {
    let mut tape = Tape::<f32>::meta();
    let d = channels / 2;
    let q = tape.placeholder(&[1, d, tokens]).unwrap();
    let k = tape.placeholder(&[1, d, tokens]).unwrap();
    let v = tape.placeholder(&[1, d, tokens]).unwrap();
    naive_token_attention(&mut tape, &q, &k, &v).unwrap();
    2 * tape.total_macs()
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "gridformer".into());
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(256);
    let config = GridConfig::preset(&preset)?;
    let p = profile(&config, 1, size, size, 2)?;
    print!("{}", p.summary());
    println!("\n{:<20} {:>12} {:>16}", "module", "params", "MACs");
    for e in &p.entries {
        let indent = "  ".repeat(e.path.matches('.').count());
        println!("{:<20} {:>12} {:>16}", format!("{indent}{}", e.path.rsplit('.').next().unwrap()), e.params, e.macs.total());
    }

    let c = config.base_channels;
    let cfg = CetlConfig::new(c, 1);
    println!("\nattention products at C={c} (both halves)");
    println!("{:>8} {:>14} {:>16} {:>8}", "tokens", "compact", "token-token", "ratio");
    for side in [8, 16, 32, 64] {
        let tokens = side * side;
        let compact = compact_attention_macs(&cfg, 1, side, side);
        let naive = naive_macs(c, tokens);
        println!("{tokens:>8} {compact:>14} {naive:>16} {:>8.1}", naive as f64 / compact as f64);
    }
    Ok(())
}
