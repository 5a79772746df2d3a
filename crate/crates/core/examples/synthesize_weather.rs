//! One synthetic scene under every weather kind, with input-quality scores.
//!
//! ```text
//! cargo run --release --example synthesize_weather -- [out_dir] [size]
//! ```

use gridformer::data::{item_rng, save_image, synth_scene, DegradationKind, DegradationSpec};
use gridformer::metrics::{psnr, ssim, ChannelMode};
use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/weather".into()));
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(96);
    std::fs::create_dir_all(&out)?;

    let clean = synth_scene(42, "scene", size, size);
    save_image(&clean, &out.join("clean.png"))?;
    println!("{:<9} {:>8} {:>7}  parameters", "kind", "PSNR", "SSIM");
    for kind in DegradationKind::ALL {
        let spec = DegradationSpec::sample(kind, &mut item_rng(42, kind.name()), size, size);
        let degraded = spec.apply(&clean)?;
        save_image(&degraded, &out.join(format!("{kind}.png")))?;
        let params: Vec<String> = spec.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "{:<9} {:>8.2} {:>7.4}  {}",
            kind.name(),
            psnr(&degraded, &clean, ChannelMode::Rgb)?,
            ssim(&degraded, &clean)?,
            params.join(" ")
        );
    }
    println!("images in {}", out.display());
    Ok(())
}
