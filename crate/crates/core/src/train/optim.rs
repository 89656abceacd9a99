//! Adam with decoupled weight decay, and a reduce-on-plateau learning-rate
//! schedule.

use super::{config_err, TrainError};
use crate::nn::params::ParamStore;

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state: per-parameter moment buffers plus the scalar hyperparameters.
/// The moment buffers are kept in the parameter store's registration order
/// and always shape-match it.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Current learning rate (the plateau schedule lowers it in place).
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: after each Adam update, `p -= lr * wd * p`.
    pub weight_decay: f64,
    /// Completed update steps (drives bias correction).
    pub step: u64,
    pub(crate) moments: Vec<Moments>,
}

impl OptimizerState {
    /// Fresh state with zeroed moments for every parameter in `store`.
    /// Betas default to (0.9, 0.999) and eps to 1e-8.
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| Moments { m: vec![0.0; p.data.len()], v: vec![0.0; p.data.len()] })
            .collect();
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        }
    }

    /// Number of parameter tensors the moment buffers cover.
    pub fn tensors(&self) -> usize {
        self.moments.len()
    }
}

/// One Adam update over every parameter: bias-corrected moment step, then
/// decoupled weight decay `p -= lr * wd * p`. `grads` must parallel the
/// store's registration order. A non-finite gradient aborts before any
/// parameter is touched, naming the offending tensor.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
) -> Result<(), TrainError> {
    if grads.len() != store.len() || state.moments.len() != store.len() {
        return Err(config_err(format!(
            "optimizer saw {} gradient tensors and {} moment tensors for {} parameters",
            grads.len(),
            state.moments.len(),
            store.len()
        )));
    }
    for (i, (_, p)) in store.iter().enumerate() {
        if grads[i].len() != p.data.len() {
            return Err(config_err(format!(
                "gradient for `{}` has {} values, parameter has {}",
                p.name,
                grads[i].len(),
                p.data.len()
            )));
        }
        if grads[i].iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NanGradient { name: p.name.clone(), step: state.step + 1 });
        }
    }

    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..grads.len() {
        let p = store.get_mut(crate::nn::params::ParamId(i));
        let mom = &mut state.moments[i];
        for (j, &g) in grads[i].iter().enumerate() {
            mom.m[j] = state.beta1 * mom.m[j] + (1.0 - state.beta1) * g;
            mom.v[j] = state.beta2 * mom.v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = mom.m[j] / bc1;
            let v_hat = mom.v[j] / bc2;
            p.data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            p.data[j] -= state.lr * state.weight_decay * p.data[j];
        }
    }
    Ok(())
}

/// Cuts the learning rate by `factor` (floored at `min_lr`) whenever the
/// monitored value fails to improve by more than a relative `threshold`
/// for `patience` consecutive observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub threshold: f64,
    pub(crate) best: f64,
    pub(crate) wait: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, min_lr: f64, threshold: f64) -> Self {
        PlateauScheduler { patience, factor, min_lr, threshold, best: f64::INFINITY, wait: 0 }
    }

    /// Records one monitored value and returns the learning rate to use
    /// from now on. The result never exceeds `lr`, so the rate is
    /// non-increasing over a run.
    pub fn step(&mut self, monitored: f64, lr: f64) -> f64 {
        let improved = if self.best.is_finite() {
            monitored < self.best - self.threshold * self.best.abs()
        } else {
            monitored.is_finite()
        };
        if improved {
            self.best = monitored;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr).min(lr);
        }
        lr
    }

    /// Lowest monitored value seen so far (infinite before the first).
    pub fn best(&self) -> f64 {
        self.best
    }
}
