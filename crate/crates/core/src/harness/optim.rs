//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::tensor::{GradMap, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate multiplier over the course of training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 at the first step to 0 after the last.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 0-based `step` out of `total` steps.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

/// First and second moments per parameter, kept in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One update. Parameters without a gradient still decay and still see
/// their moments advance with a zero gradient.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, g) in grads.iter() {
        if !g.all_finite() {
            return Err(HarnessError::Numeric(format!(
                "non-finite gradient for {}",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let grad = grads.get(id).map(|g| g.to_f64_vec());
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let param = store.get_mut(id).data_mut();
        for i in 0..param.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let mut p = param[i].as_f64();
            p -= cfg.learning_rate * cfg.weight_decay * p;
            p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            param[i] = T::of(p);
        }
    }
    Ok(())
}
