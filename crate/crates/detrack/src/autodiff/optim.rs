//! Named trainable parameters and the AdamW update.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named array with first/second moment accumulators for AdamW.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    id: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Identity used to bind this parameter to tape nodes.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Replace the value, keeping optimizer state shapes in sync.
    pub fn set_value(&mut self, value: Tensor) {
        assert!(
            value.shape() == self.value.shape(),
            "set_value shape mismatch for {}: {:?} vs {:?}",
            self.name,
            value.shape(),
            self.value.shape()
        );
        self.value = value;
    }
}

/// AdamW hyperparameters. Weight decay is decoupled: it shrinks the parameter
/// directly instead of entering the moment estimates.
#[derive(Clone, Copy, Debug)]
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

/// One AdamW step on a single parameter. `t` is the 1-based step count used
/// for bias correction. Returns false (and leaves the parameter untouched,
/// aside from nothing at all) when the gradient is non-finite.
pub fn adamw_step(
    param: &mut Parameter,
    grad: &Tensor,
    lr: f64,
    t: u64,
    cfg: &AdamWConfig,
) -> bool {
    assert!(
        grad.shape() == param.value.shape(),
        "gradient shape {:?} vs parameter {:?} for {}",
        grad.shape(),
        param.value.shape(),
        param.name
    );
    if !grad.all_finite() {
        return false;
    }
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let n = param.value.numel();
    for i in 0..n {
        let g = grad.data()[i];
        let m = b1 * param.m.data()[i] + (1.0 - b1) * g;
        let v = b2 * param.v.data()[i] + (1.0 - b2) * g * g;
        param.m.data_mut()[i] = m;
        param.v.data_mut()[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        let w = param.value.data()[i];
        param.value.data_mut()[i] = w - lr * cfg.weight_decay * w - lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    true
}
