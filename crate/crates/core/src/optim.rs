//! Adam with decoupled weight decay, and a reduce-on-plateau schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. The decay shrink
/// `lr·wd·param` is applied to the pre-step value and kept out of the moments.
pub fn adam_step(
    name: &str,
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() || param.len() != state.v.len() {
        return Err(Error::shape(format!(
            "{name}: parameter, gradient and state lengths differ ({}, {}, {})",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} at index {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = cfg.lr * cfg.weight_decay;
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= decay * *p + cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Adam over a named parameter set, with moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Updates every parameter that carries a gradient. All gradients are
    /// checked before any parameter changes.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>) -> Result<()> {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = p.grad() {
                if let Some(i) = g.iter().position(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name} at index {i}")));
                }
            }
        }
        for (name, p) in params {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::new(grad.len()));
            adam_step(name, p.data_mut(), &grad, state, &self.config)?;
        }
        Ok(())
    }
}

/// Reduce-on-plateau: when the monitored loss fails to beat its best value
/// by more than `min_delta` for `patience` consecutive epochs, the rate is
/// multiplied by `factor` and the counter restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub min_delta: f64,
    pub factor: f64,
    best: Option<f64>,
    wait: usize,
}

impl Plateau {
    pub fn new(patience: usize, min_delta: f64, factor: f64) -> Result<Self> {
        if patience == 0 {
            return Err(Error::invalid("plateau patience must be at least 1"));
        }
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::invalid(format!(
                "plateau factor must be in (0, 1), got {factor}"
            )));
        }
        if !(min_delta >= 0.0) {
            return Err(Error::invalid(format!(
                "plateau min_delta must be ≥ 0, got {min_delta}"
            )));
        }
        Ok(Plateau {
            patience,
            min_delta,
            factor,
            best: None,
            wait: 0,
        })
    }

    /// Feeds one epoch's loss and returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        match self.best {
            Some(best) if !(loss < best - self.min_delta) => {
                self.wait += 1;
                if self.wait >= self.patience {
                    self.wait = 0;
                    return lr * self.factor;
                }
            }
            _ => {
                self.best = Some(loss);
                self.wait = 0;
            }
        }
        lr
    }
}

/// Replays `history` through a fresh [`Plateau`] and returns the final rate.
pub fn plateau_schedule(
    history: &[f64],
    patience: usize,
    min_delta: f64,
    factor: f64,
    lr: f64,
) -> Result<f64> {
    let mut p = Plateau::new(patience, min_delta, factor)?;
    Ok(history.iter().fold(lr, |lr, &loss| p.observe(loss, lr)))
}
