//! AdamW and the warmup-plus-cosine learning-rate schedule.

use std::f64::consts::PI;

use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update with decoupled weight decay. Parameters without a
/// gradient entry are left untouched, including their decay.
pub fn adamw_step(params: &mut ParamStore, grads: &Grads, state: &mut OptimState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    ensure!(state.m.len() == params.len(), "optimizer state has {} slots for {} parameters", state.m.len(), params.len());
    for (id, g) in grads.iter() {
        let (p, m) = (params.get(id), &state.m[id.index()]);
        ensure!(
            g.shape() == p.shape() && m.shape() == p.shape(),
            "gradient {:?} or moment {:?} does not match parameter {} {:?}",
            g.shape(),
            m.shape(),
            params.name(id),
            p.shape()
        );
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter() {
        let i = id.index();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * cfg.weight_decay * p[j];
            p[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Linear warmup from zero to `base` over `warmup` steps, then cosine decay
/// to zero at `total`; zero afterwards.
pub fn cosine_lr(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * base * (1.0 + (PI * progress).cos())
}
