use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ModelParams, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Cosine decay from `lr` at step 0 to `lr / 10` at `total`.
    pub fn cosine_at(&self, step: usize, total: usize) -> AdamConfig {
        let t = (step as f64 / total.max(1) as f64).min(1.0);
        AdamConfig {
            lr: self.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos())),
            ..*self
        }
    }
}

/// First and second moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every trainable tensor, using the
/// gradients accumulated on the tensors. A trainable tensor without an
/// accumulated gradient is treated as having zero gradient.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, cfg: &AdamConfig) -> Result<(), NnError> {
    if !(cfg.lr >= 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2) && cfg.eps > 0.0) {
        return Err(NnError::InvalidArgument(format!("invalid Adam config {cfg:?}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        if !tensor.is_trainable() {
            continue;
        }
        let n = tensor.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(NnError::Shape(format!(
                "optimizer state for {name} has {} values, tensor has {n}",
                m.len()
            )));
        }
        let grad = tensor.grad().map(<[f64]>::to_vec);
        let data = tensor.data_mut();
        for i in 0..n {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NnError::NonFinite("adam_step"));
        }
    }
    Ok(())
}
