//! SGD and Adam (weight decay 0) over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-2,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Adam moments; unused by SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }
}

/// Applies one update in place.
pub fn optimizer_step(
    params: &mut [f64],
    gradient: &[f64],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<()> {
    if params.len() != gradient.len() {
        return Err(validation("gradient length differs from parameter count"));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let lr = config.learning_rate;
    match config.kind {
        OptimizerKind::Sgd => {
            params.iter_mut().zip(gradient).for_each(|(p, g)| *p -= lr * g);
        }
        OptimizerKind::Adam => {
            if state.m.len() != params.len() {
                *state = OptimizerState::new(params.len());
            }
            let (b1, b2) = config.betas;
            state.step += 1;
            let bc1 = 1.0 - b1.powi(state.step as i32);
            let bc2 = 1.0 - b2.powi(state.step as i32);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(gradient)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
    }
    Ok(())
}
