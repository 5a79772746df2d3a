//! Walks one compact attention layer step by step on a small feature map:
//! sampling, the per-half channel affinity maps, the value exchange and the
//! restored extents.
//!
//! ```text
//! cargo run --release --example attention_anatomy
//! ```

use gridformer::autodiff::{ParamStore, Tape};
use gridformer::cesa::{Cetl, CetlConfig};
use gridformer::nn::Builder;
use gridformer::tensor::Tensor;

fn main() -> anyhow::Result<()> {
    let cfg = CetlConfig::new(8, 2);
    let mut store = ParamStore::<f64>::new();
    let cetl = Cetl::new(&mut Builder::new(&mut store, 5), "layer", cfg.clone())?;
    let x = Tensor::from_fn(&[1, 8, 8, 8], |i| ((i * 37 % 101) as f64 / 101.0) - 0.5)?;

    let mut tape = Tape::<f64>::record();
    let xv = tape.input(x);
    let sampled = cetl.feature_sample(&mut tape, &xv)?;
    println!("input {:?} -> sampled {:?} (stride {})", xv.dims(), sampled.dims(), cfg.sample_stride);
    let att = cetl.compact_attention(&mut tape, &store, &sampled)?;
    let d = cfg.branch_channels();
    for (half, map) in att.maps.iter().enumerate() {
        let m = map.tensor().expect("recorded");
        println!("\nhalf {half}: {d}x{d} channel affinities (row = query channel), values from half {}", 1 - half);
        for row in m.data().chunks(d) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            println!("  [{}]  sum {:.6}", cells.join(" "), row.iter().sum::<f64>());
        }
    }
    let enhanced = cetl.local_enhance(&mut tape, &store, &att.out)?;
    println!("\nattention out {:?} -> local enhancement {:?}", att.out.dims(), enhanced.dims());

    let mut tape = Tape::<f64>::inference();
    let xv = tape.input(xv.tensor()?.clone());
    let y = cetl.forward(&mut tape, &store, &xv)?;
    println!("full layer out {:?}, MACs by scope:", y.dims());
    for (scope, c) in tape.costs() {
        if c.total() > 0 {
            println!("  {scope:<28} conv {:>6} deconv {:>6} matmul {:>6}", c.conv, c.conv_transpose, c.matmul);
        }
    }
    Ok(())
}
