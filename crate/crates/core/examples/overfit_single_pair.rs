//! Fits the tiny grid to one hazy/clean pair and reports PSNR as it goes.
//!
//! ```text
//! cargo run --release --example overfit_single_pair -- [steps] [lr]
//! ```

use gridformer::data::{DegradationKind, PairDataset};
use gridformer::grid::{GridConfig, GridFormer};
use gridformer::loss::LossConfig;
use gridformer::metrics::{psnr, ChannelMode};
use gridformer::train::{restore_image, train, TrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(400);
    let lr: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2e-3);

    let data = PairDataset::synthesize(DegradationKind::Haze, 1, 64, 1, "pair_")?;
    let (degraded, clean) = (&data.degraded[0], &data.clean[0]);
    let (model, mut store) = GridFormer::init::<f32>(GridConfig::preset("tiny")?, 1)?;
    println!("{} parameters; input PSNR {:.2} dB", store.numel(), psnr(degraded, clean, ChannelMode::Rgb)?);

    let cfg = TrainConfig {
        total_steps: steps,
        batch: 1,
        patch: 64,
        lr_start: lr,
        flip: false,
        seed: 1,
        ..TrainConfig::default()
    };
    let every = (steps / 10).max(1);
    let out = train(&model, &mut store, &data, &LossConfig::default(), &cfg, None, |r| {
        if r.step % every == 0 {
            println!("step {:>5}  L {:.5}  L_char {:.5}  L_per {:.5}  lr {:.2e}", r.step, r.total, r.char, r.per, r.lr);
        }
    })?;
    let restored = restore_image(&model, &store, degraded)?;
    println!(
        "after {} steps ({:.0}s): PSNR {:.2} dB",
        out.trace.len(),
        out.elapsed.as_secs_f64(),
        psnr(&restored, clean, ChannelMode::Rgb)?
    );
    Ok(())
}
