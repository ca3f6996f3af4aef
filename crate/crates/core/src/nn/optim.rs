use serde::{Deserialize, Serialize};

use super::ModelWeights;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig::with_lr(0.05)
    }
}

impl SgdConfig {
    /// Momentum 0.9 and weight decay 1e-4.
    pub fn with_lr(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum. Velocity buffers are allocated lazily and
/// stay aligned with the parameters they were first used with.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        SgdState {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// `v ← μ·v + (g + λ·w)`, then `w ← w − lr·v`.
///
/// Nothing is written if any updated value would be non-finite.
pub fn sgd_step(w: &mut ModelWeights, grad: &ModelWeights, state: &mut SgdState) -> Result<()> {
    w.ensure_aligned(grad)?;
    let n = w.param_count();
    if state.velocity.is_empty() {
        state.velocity = vec![0.0; n];
    } else if state.velocity.len() != n {
        return Err(Error::Shape(format!(
            "velocity has {} entries, weights {n}",
            state.velocity.len()
        )));
    }
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
    } = state.config;
    let mut new_v = Vec::with_capacity(n);
    let mut new_w = Vec::with_capacity(n);
    for ((&wv, &gv), &vv) in w.values().zip(grad.values()).zip(&state.velocity) {
        let v = momentum * vv + (gv + weight_decay * wv);
        let updated = wv - lr * v;
        if !updated.is_finite() || !v.is_finite() {
            let idx = new_w.len();
            let (name, offset) = locate(w, idx);
            return Err(Error::NonFinite {
                context: format!("sgd update of {name}[{offset}]: w={wv}, grad={gv}, velocity={vv}, lr={lr}"),
            });
        }
        new_v.push(v);
        new_w.push(updated);
    }
    state.velocity = new_v;
    for (dst, src) in w.values_mut().zip(new_w) {
        *dst = src;
    }
    Ok(())
}

fn locate(w: &ModelWeights, mut idx: usize) -> (String, usize) {
    for (name, t) in w.entries() {
        if idx < t.len() {
            return (name.clone(), idx);
        }
        idx -= t.len();
    }
    ("?".into(), idx)
}

/// Learning-rate schedule indexed from 0 (round or epoch).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `base · factor^⌊t / period⌋`
    Step { base: f64, factor: f64, period: usize },
    /// `base · ½(1 + cos(π t / total))`
    Cosine { base: f64, total: usize },
}

impl LrSchedule {
    /// Decay by 0.1 every 30 steps.
    pub fn step(base: f64) -> Self {
        LrSchedule::Step {
            base,
            factor: 0.1,
            period: 30,
        }
    }

    pub fn lr(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Step { base, factor, period } => base * factor.powi((t / period.max(1)) as i32),
            LrSchedule::Cosine { base, total } => {
                let frac = (t as f64 / total.max(1) as f64).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}
