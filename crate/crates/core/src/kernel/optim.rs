//! Gradient-descent and adaptive-moment parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-buffer optimizer state. Moments and step counts are tracked per
/// coordinate so that masked updates (two-path architecture steps) leave
/// untouched coordinates bit-identical.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<u64>,
}

impl ParamState {
    pub fn new(len: usize) -> Self {
        ParamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self, coord: usize) -> u64 {
        self.t[coord]
    }
}

/// Applies one update in place. With `mask` given, only coordinates whose
/// mask entry is true are touched.
pub fn optimizer_step_masked(
    opt: &Optimizer,
    state: &mut ParamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    mask: Option<&[bool]>,
    context: &str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Config(format!(
            "optimizer buffers disagree in {context}: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (i, &g) in grads.iter().enumerate() {
        if let Some(mask) = mask {
            if !mask[i] {
                continue;
            }
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient coordinate {i} in {context}"),
            });
        }
        match *opt {
            Optimizer::Sgd => {
                params[i] -= lr * g;
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                state.t[i] += 1;
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let t = state.t[i] as f64;
                let m_hat = state.m[i] / (1.0 - beta1.powf(t));
                let v_hat = state.v[i] / (1.0 - beta2.powf(t));
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Unmasked update over a whole buffer.
pub fn optimizer_step(
    opt: &Optimizer,
    state: &mut ParamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    context: &str,
) -> Result<()> {
    optimizer_step_masked(opt, state, params, grads, lr, None, context)
}
