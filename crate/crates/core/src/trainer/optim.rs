//! Adam, the cosine learning-rate schedule, and EMA weight shadows.

use std::f64::consts::PI;

use super::{StageConfig, TrainError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * t / t_max)) / 2` for
/// `0 <= t <= t_max`.
pub fn cosine_lr(t: usize, cfg: &StageConfig) -> Result<f64, TrainError> {
    if t > cfg.t_max {
        return Err(TrainError::OutOfRange { t, t_max: cfg.t_max });
    }
    let phase = PI * t as f64 / cfg.t_max as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).flatten().all(|x| x.is_finite())
    }
}

fn check_shapes(params: &[&mut [f64]], other: &[&[f64]]) -> Result<(), TrainError> {
    if params.len() != other.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameter tensors but {} gradient tensors",
            params.len(),
            other.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(other).enumerate() {
        if p.len() != g.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "tensor {i}: {} parameters but {} gradients",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update, no weight decay. Moments are created on
/// the first call.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    check_shapes(params, grads)?;
    if state.m.is_empty() && state.step == 0 {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    let moments_match = state.m.len() == params.len()
        && state.v.len() == params.len()
        && params
            .iter()
            .zip(state.m.iter().zip(&state.v))
            .all(|(p, (m, v))| p.len() == m.len() && p.len() == v.len());
    if !moments_match {
        return Err(TrainError::ShapeMismatch(
            "optimizer state does not match parameters".to_string(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `shadow <- decay * shadow + (1 - decay) * live`, elementwise.
pub fn ema_update(shadow: &mut [&mut [f64]], live: &[&[f64]], decay: f64) -> Result<(), TrainError> {
    check_shapes(shadow, live)?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(TrainError::InvalidConfig(format!("EMA decay {decay} outside [0, 1]")));
    }
    for (s, l) in shadow.iter_mut().zip(live) {
        for (si, li) in s.iter_mut().zip(l.iter()) {
            *si = decay * *si + (1.0 - decay) * li;
        }
    }
    Ok(())
}

/// Decay used after optimizer step `step` (1-based). With warmup the shadow
/// follows the live weights closely early on: `min(decay, (1 + step) / (10 + step))`.
pub fn effective_ema_decay(decay: f64, step: u64, warmup: bool) -> f64 {
    if warmup {
        let s = step as f64;
        decay.min((1.0 + s) / (10.0 + s))
    } else {
        decay
    }
}
