//! Adaptive-moment (Adam) updates with global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::params::{GradRecord, Matrix, ParamStore};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 clip applied before the moment update; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.entries().iter().map(|e| Matrix::zeros(e.value.dim())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied {
        grad_norm: f64,
        clipped: bool,
    },
    /// Non-finite gradients: parameters and moments left untouched.
    Skipped,
}

/// One descent step on `params` (minimizes; negate gradients to ascend).
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &GradRecord,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<StepOutcome> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(shape_err("optimizer_step", params.len(), grads.len()));
    }
    for (id, g) in grads.iter() {
        if g.dim() != params.value(id).dim() {
            return Err(shape_err(
                "optimizer_step",
                format!("{:?}", params.value(id).dim()),
                format!("{:?}", g.dim()),
            ));
        }
    }
    if !grads.is_finite() {
        return Ok(StepOutcome::Skipped);
    }
    let norm = grads.l2_norm();
    let factor = match config.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - config.beta1.powf(t);
    let bc2 = 1.0 - config.beta2.powf(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let p = params.value_mut(id);
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            let g = g * factor;
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        });
    }
    Ok(StepOutcome::Applied {
        grad_norm: norm,
        clipped: factor < 1.0,
    })
}
