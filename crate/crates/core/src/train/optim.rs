//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros_like(p.value())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[index], &self.v[index])
    }
}

/// One AdamW update of every parameter from its stored gradient.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::contract(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.grad().is_none()) {
        return Err(Error::contract(format!("no gradient for {}", p.path())));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        let g = p.grad().expect("checked above").clone();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let value = p.value_mut();
        for (((x, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *x *= decay;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total`;
/// steps past `total` stay at `lr_end`.
pub fn cosine_lr(step: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_end;
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + phase.cos())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::lit(max_norm / norm);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).scale_grad(scale);
        }
    }
    norm
}
