//! End-to-end gradient check: the analytic gradient of the full objective
//! against central finite differences for every scalar of every parameter.
//!
//! Finite differences re-run the recorded forward operations with one
//! parameter perturbed (see [`Tape::probe`]), so only the part of the graph
//! downstream of that parameter is recomputed. No backward code is involved.

use crate::autodiff::{finite_diff_batched, grad_close, relative_error, ParamStore, Tape};
use crate::data::{make_pyramid, synth_scene, DegradationKind, DegradationSpec, item_rng};
use crate::error::Result;
use crate::grid::{GridConfig, GridFormer};
use crate::loss::{objective, ConvStack, LossConfig};
use crate::tensor::Tensor;
use std::time::{Duration, Instant};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub grid: GridConfig,
    pub loss: LossConfig,
    pub size: usize,
    pub seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Perturbed evaluations per replay.
    pub batch: usize,
    /// Only check parameters whose path starts with this prefix.
    pub prefix: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            grid: GridConfig::preset("micro").expect("preset"),
            loss: LossConfig::default(),
            size: 16,
            seed: 7,
            step: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            batch: 32,
            prefix: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub path: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_diff: f64,
    /// Elements outside tolerance at the primary step.
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub loss: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn elements(&self) -> usize {
        self.params.iter().map(|p| p.numel).sum()
    }

    pub fn failures(&self) -> usize {
        self.params.iter().map(|p| p.failures).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_diff).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

/// A hazy/clean pair of `size x size` for the check.
pub fn sample_pair(seed: u64, size: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let clean = synth_scene(seed, "gradcheck", size, size);
    let spec = DegradationSpec::sample(DegradationKind::Haze, &mut item_rng(seed, "gradcheck"), size, size);
    let hazy = spec.apply(&clean)?;
    Ok((hazy.cast(), clean.cast()))
}

pub fn run_gradcheck(cfg: &GradcheckConfig, mut progress: impl FnMut(&ParamCheck)) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut store = ParamStore::<f64>::new();
    let model = GridFormer::new(cfg.grid.clone(), &mut store, cfg.seed)?;
    let extractor = ConvStack::standin(cfg.loss.extractor_seed);
    let (hazy, clean) = sample_pair(cfg.seed, cfg.size)?;

    let mut tape = Tape::<f64>::record();
    let xs: Vec<_> = make_pyramid(&hazy, cfg.grid.rows)?.into_iter().map(|t| tape.input(t)).collect();
    let refs: Vec<_> = make_pyramid(&clean, cfg.grid.rows)?.into_iter().map(|t| tape.input(t)).collect();
    let ys = model.forward(&mut tape, &store, &xs)?;
    let obj = objective(&mut tape, &ys, &refs, &cfg.loss, &extractor)?;
    let grads = tape.backward(&obj.total)?;

    let mut params = Vec::new();
    for (id, p) in store.iter() {
        if let Some(prefix) = &cfg.prefix {
            if !crate::autodiff::path_has_prefix(p.path(), prefix) {
                continue;
            }
        }
        let zeros;
        let analytic = match grads.param(id) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros_like(p.value());
                &zeros
            }
        };
        let mut probe = tape.probe(&obj.total, id)?;
        let numeric = finite_diff_batched(|xs| probe.eval_batch(xs), p.value(), cfg.step, cfg.batch);
        let mut check = ParamCheck {
            path: p.path().to_string(),
            numel: p.numel(),
            max_rel_err: 0.0,
            max_abs_diff: 0.0,
            failures: 0,
        };
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let diff = (a - n).abs();
            check.max_abs_diff = check.max_abs_diff.max(diff);
            if diff > cfg.abs_floor {
                check.max_rel_err = check.max_rel_err.max(relative_error(a, n));
            }
            if !grad_close(a, n, cfg.rel_tol, cfg.abs_floor) {
                check.failures += 1;
            }
        }
        progress(&check);
        params.push(check);
    }
    Ok(GradcheckReport {
        params,
        loss: obj.report.total,
        elapsed: start.elapsed(),
    })
}
