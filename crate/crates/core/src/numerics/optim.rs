use serde::{Deserialize, Serialize};

use super::array::{Array, Real};
use super::params::{ParamStore, Parameter};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Array<T>,
    pub v: Array<T>,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: Array::zeros(shape),
            v: Array::zeros(shape),
            config,
        }
    }

    /// One bias-corrected Adam update of `param` from its stored gradient.
    pub fn step(&mut self, param: &mut Parameter<T>) -> Result<()> {
        if param.grad.shape() != self.m.shape() {
            return Err(Error::Optimizer {
                name: param.name.clone(),
                reason: format!("state shape {:?} vs gradient {:?}", self.m.shape(), param.grad.shape()),
            });
        }
        if !param.grad.is_finite() {
            return Err(Error::Optimizer {
                name: param.name.clone(),
                reason: "non-finite gradient".into(),
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.epsilon));
        let values = param.value.data_mut().iter_mut();
        let grads = param.grad.data().iter();
        let moments = self.m.data_mut().iter_mut().zip(self.v.data_mut().iter_mut());
        for ((w, &g), (m, v)) in values.zip(grads).zip(moments) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam over every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    states: Vec<Option<AdamState<T>>>,
    config: AdamConfig,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        Self {
            states: store
                .iter()
                .map(|p| p.trainable.then(|| AdamState::new(p.value.shape(), config)))
                .collect(),
            config,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
        for s in self.states.iter_mut().flatten() {
            s.config.learning_rate = lr;
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        // Check everything first so a bad gradient leaves every parameter untouched.
        for p in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::Optimizer {
                    name: p.name.clone(),
                    reason: "non-finite gradient".into(),
                });
            }
        }
        for (state, p) in self.states.iter_mut().zip(store.iter_mut()) {
            if let Some(s) = state {
                s.step(p)?;
            }
        }
        Ok(())
    }
}

/// Divides the learning rate by `factor` whenever the monitored metric has not
/// improved for `patience` consecutive epochs (lower is better).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    stale_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: None,
            stale_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch's metric; returns the (possibly reduced) learning rate and
    /// whether the metric improved.
    pub fn observe(&mut self, metric: f64, lr: f64) -> (f64, bool) {
        if self.best.is_none_or(|b| metric < b) {
            self.best = Some(metric);
            self.stale_epochs = 0;
            return (lr, true);
        }
        self.stale_epochs += 1;
        if self.stale_epochs >= self.patience {
            self.stale_epochs = 0;
            return (lr / self.factor, false);
        }
        (lr, false)
    }
}
