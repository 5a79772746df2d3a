//! Optimizer, schedule, checkpoints and the training loop.

pub mod checkpoint;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, restore_into, save_checkpoint, Checkpoint};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, OptimizerState};
pub use trainer::{evaluate, restore_image, train, EvalReport, PairScore, TraceRow, TrainOutcome, TRACE_HEADER};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub optimizer: AdamWConfig,
    pub total_steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    /// Accepted for interface stability; the loop is single-threaded and
    /// therefore always reproducible.
    pub deterministic: bool,
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Random flips on top of the random crop.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 3e-4,
            lr_end: 1e-6,
            optimizer: AdamWConfig::default(),
            total_steps: 2000,
            batch: 4,
            patch: 64,
            seed: 0,
            deterministic: true,
            grad_clip: None,
            checkpoint_every: 0,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end <= self.lr_start) || !(self.lr_end >= 0.0) {
            return Err(Error::config(format!(
                "need 0 <= lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        if self.total_steps == 0 || self.batch == 0 || self.patch == 0 {
            return Err(Error::config("total_steps, batch and patch must be positive"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::config("betas must lie in [0, 1) and eps must be positive"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_bad_values_do_not() {
        TrainConfig::default().validate().unwrap();
        let bad = [
            TrainConfig { lr_end: 1e-3, ..TrainConfig::default() },
            TrainConfig { total_steps: 0, ..TrainConfig::default() },
            TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
