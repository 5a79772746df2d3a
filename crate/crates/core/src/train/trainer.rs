//! The training loop and test-set evaluation.

use super::checkpoint::save_checkpoint;
use super::optim::{adamw_step, clip_grad_norm, cosine_lr, OptimizerState};
use super::TrainConfig;
use crate::autodiff::{ParamStore, Tape};
use crate::data::{augment, crop_at, item_rng, make_pyramid, stack, PairDataset};
use crate::error::{Error, Result};
use crate::grid::GridFormer;
use crate::loss::{objective, ConvStack, LossConfig};
use crate::metrics::{psnr, ssim, ChannelMode};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

pub const TRACE_HEADER: &str = "step,L_char,L_per,L,lr";

/// Loss values measured at one step, before that step's update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub char: f64,
    pub per: f64,
    pub total: f64,
    pub lr: f64,
}

impl TraceRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.char, self.per, self.total, self.lr)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub elapsed: Duration,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Yields dataset indices in a fresh seeded permutation every epoch.
struct BatchOrder {
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    next: usize,
}

impl BatchOrder {
    fn new(len: usize, seed: u64) -> Self {
        let mut b = BatchOrder {
            seed,
            epoch: 0,
            order: (0..len).collect(),
            next: 0,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut item_rng(self.seed, &format!("epoch{}", self.epoch)));
    }

    fn take(&mut self) -> usize {
        if self.next == self.order.len() {
            self.epoch += 1;
            self.next = 0;
            self.shuffle();
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

fn crop_pair(
    degraded: &Tensor<f32>,
    clean: &Tensor<f32>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if cfg.flip {
        return augment(degraded, clean, cfg.patch, rng);
    }
    let (_, _, h, w) = degraded.shape().nchw()?;
    if cfg.patch > h || cfg.patch > w {
        return Err(Error::contract(format!("patch {} does not fit a {h}x{w} image", cfg.patch)));
    }
    let top = rng.gen_range(0..=h - cfg.patch);
    let left = rng.gen_range(0..=w - cfg.patch);
    Ok((
        crop_at(degraded, top, left, cfg.patch, cfg.patch)?,
        crop_at(clean, top, left, cfg.patch, cfg.patch)?,
    ))
}

/// Trains `store` in place.
///
/// With `out`, the loss trace goes to `out/trace.csv` as it is produced,
/// periodic checkpoints to `out/checkpoints/` and the final model to
/// `out/model.gfck`.
pub fn train(
    model: &GridFormer,
    store: &mut ParamStore<f32>,
    data: &PairDataset,
    loss: &LossConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training needs at least one pair"));
    }
    let m = model.config().size_multiple();
    if !cfg.patch.is_multiple_of(m) {
        return Err(Error::config(format!("patch {} must be a multiple of {m} for this grid", cfg.patch)));
    }
    let start = Instant::now();
    let mut trace_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("trace.csv");
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{TRACE_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let extractor = ConvStack::standin(loss.extractor_seed);
    let mut state = OptimizerState::new(store);
    let mut order = BatchOrder::new(data.len(), cfg.seed);
    let rows = model.config().rows;
    let mut trace = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let mut rng = item_rng(cfg.seed, &format!("step{step}"));
        let mut degraded = Vec::with_capacity(cfg.batch);
        let mut clean = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = order.take();
            let (d, c) = crop_pair(&data.degraded[i], &data.clean[i], cfg, &mut rng)?;
            degraded.push(d);
            clean.push(c);
        }
        let degraded = stack(&degraded.iter().collect::<Vec<_>>())?;
        let clean = stack(&clean.iter().collect::<Vec<_>>())?;

        let mut tape = Tape::record();
        let xs: Vec<_> = make_pyramid(&degraded, rows)?.into_iter().map(|t| tape.input(t)).collect();
        let refs: Vec<_> = make_pyramid(&clean, rows)?.into_iter().map(|t| tape.input(t)).collect();
        let ys = model.forward(&mut tape, store, &xs)?;
        let obj = objective(&mut tape, &ys, &refs, loss, &extractor)?;
        let r = &obj.report;
        if !r.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("L_char={} L_per={} L={}", r.char, r.per, r.total),
            });
        }
        let grads = tape.backward(&obj.total)?;
        drop(tape);
        store.assign_grads(&grads);
        drop(grads);
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(store, max);
        }
        let lr = cosine_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_end);
        adamw_step(store, &mut state, lr, &cfg.optimizer)?;
        store.clear_grads();

        let row = TraceRow {
            step,
            char: r.char,
            per: r.per,
            total: r.total,
            lr,
        };
        if let Some((f, path)) = &mut trace_file {
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        progress(&row);
        trace.push(row);

        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.total_steps {
                let path = dir.join("checkpoints").join(format!("step_{:06}.gfck", step + 1));
                save_checkpoint(&path, model.config(), store)?;
            }
        }
    }

    let checkpoint = match out {
        Some(dir) => {
            if let Some((mut f, path)) = trace_file {
                f.flush().map_err(|e| Error::io(&path, e))?;
            }
            let path = dir.join("model.gfck");
            save_checkpoint(&path, model.config(), store)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        trace,
        elapsed: start.elapsed(),
        checkpoint,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub id: String,
    /// Degraded input against clean.
    pub input_psnr: f64,
    pub input_ssim: f64,
    /// Restored output against clean; absent when no model was given.
    pub output_psnr: Option<f64>,
    pub output_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairScore>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&PairScore) -> Option<f64>) -> Option<f64> {
        let v: Option<Vec<f64>> = self.pairs.iter().map(f).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_input_psnr(&self) -> f64 {
        self.mean(|p| Some(p.input_psnr)).unwrap_or(f64::NAN)
    }

    pub fn mean_input_ssim(&self) -> f64 {
        self.mean(|p| Some(p.input_ssim)).unwrap_or(f64::NAN)
    }

    pub fn mean_output_psnr(&self) -> Option<f64> {
        self.mean(|p| p.output_psnr)
    }

    pub fn mean_output_ssim(&self) -> Option<f64> {
        self.mean(|p| p.output_ssim)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,input_psnr,input_ssim,output_psnr,output_ssim\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for p in &self.pairs {
            s += &format!(
                "{},{},{},{},{}\n",
                p.id,
                p.input_psnr,
                p.input_ssim,
                opt(p.output_psnr),
                opt(p.output_ssim)
            );
        }
        s += &format!(
            "mean,{},{},{},{}\n",
            self.mean_input_psnr(),
            self.mean_input_ssim(),
            opt(self.mean_output_psnr()),
            opt(self.mean_output_ssim())
        );
        s
    }
}

/// Full-resolution output of the finest level, clamped to `[0, 1]`.
pub fn restore_image(model: &GridFormer, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::inference();
    let ys = model.restore(&mut tape, store, image)?;
    let mut out = ys[0]
        .value()
        .ok_or_else(|| Error::contract("inference tape produced no value"))?
        .clone();
    crate::data::clamp_unit(&mut out);
    Ok(out)
}

/// PSNR (RGB) and SSIM of every pair, for the degraded input and, with a
/// model, for its restoration.
pub fn evaluate(model: Option<(&GridFormer, &ParamStore<f32>)>, data: &PairDataset) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (d, c) = (&data.degraded[i], &data.clean[i]);
        let (output_psnr, output_ssim) = match model {
            Some((m, s)) => {
                let y = restore_image(m, s, d)?;
                (Some(psnr(&y, c, ChannelMode::Rgb)?), Some(ssim(&y, c)?))
            }
            None => (None, None),
        };
        pairs.push(PairScore {
            id: data.ids[i].clone(),
            input_psnr: psnr(d, c, ChannelMode::Rgb)?,
            input_ssim: ssim(d, c)?,
            output_psnr,
            output_ssim,
        });
    }
    Ok(EvalReport { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DegradationKind;
    use crate::grid::GridConfig;

    fn setup(size: usize) -> (GridFormer, ParamStore<f32>, PairDataset) {
        let (model, store) = GridFormer::init::<f32>(GridConfig::preset("micro").unwrap(), 5).unwrap();
        let data = PairDataset::synthesize(DegradationKind::Haze, 2, size, 5, "t").unwrap();
        (model, store, data)
    }

    fn short(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch: 1,
            patch: 16,
            seed: 3,
            lr_start: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_alpha_trace_is_pure_charbonnier() {
        let (model, mut store, data) = setup(32);
        let loss = LossConfig { alpha: 0.0, ..LossConfig::default() };
        let out = train(&model, &mut store, &data, &loss, &short(3), None, |_| {}).unwrap();
        for row in &out.trace {
            assert_eq!(row.total, row.char, "{row:?}");
            assert!(row.per > 0.0);
        }
    }

    #[test]
    fn trace_file_and_checkpoints_are_written() {
        let (model, mut store, data) = setup(32);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: 2, ..short(5) };
        let out = train(&model, &mut store, &data, &LossConfig::default(), &cfg, Some(dir.path()), |_| {}).unwrap();
        let text = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], out.trace[0].csv());
        assert!(dir.path().join("checkpoints/step_000002.gfck").exists());
        assert!(dir.path().join("checkpoints/step_000004.gfck").exists());
        let (_, loaded) = crate::train::load_checkpoint::<f32>(out.checkpoint.as_deref().unwrap()).unwrap();
        assert!(store.iter().zip(loaded.iter()).all(|((_, a), (_, b))| a.value() == b.value()));
        assert_eq!(out.trace[0].lr, 1e-3);
    }

    #[test]
    fn runs_are_reproducible() {
        let (model, store, data) = setup(32);
        let run = || {
            let mut s = store.clone();
            train(&model, &mut s, &data, &LossConfig::default(), &short(4), None, |_| {}).unwrap().trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let (model, mut store, mut data) = setup(32);
        for d in &mut data.degraded {
            d.data_mut().fill(f32::NAN);
        }
        let err = train(&model, &mut store, &data, &LossConfig::default(), &short(2), None, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    }

    #[test]
    fn bad_patch_and_empty_data_are_rejected() {
        let (model, mut store, data) = setup(32);
        let cfg = TrainConfig { patch: 24, ..short(1) };
        assert!(matches!(
            train(&model, &mut store, &data, &LossConfig::default(), &cfg, None, |_| {}),
            Err(Error::Config(_))
        ));
        let empty = PairDataset::synthesize(DegradationKind::Haze, 0, 32, 0, "e").unwrap();
        assert!(train(&model, &mut store, &empty, &LossConfig::default(), &short(1), None, |_| {}).is_err());
    }

    #[test]
    fn batch_order_visits_every_item_once_per_epoch() {
        let mut order = BatchOrder::new(5, 1);
        for _ in 0..3 {
            let mut epoch: Vec<usize> = (0..5).map(|_| order.take()).collect();
            epoch.sort_unstable();
            assert_eq!(epoch, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn identical_pairs_evaluate_to_the_caps() {
        let (model, store, mut data) = setup(32);
        data.degraded = data.clean.clone();
        let report = evaluate(Some((&model, &store)), &data).unwrap();
        assert_eq!(report.mean_input_psnr(), 99.0);
        assert_eq!(report.mean_input_ssim(), 1.0);
        assert!(report.mean_output_psnr().unwrap() < 99.0);
        assert!(report.to_csv().starts_with("id,input_psnr"));
    }
}
