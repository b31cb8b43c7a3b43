//! Bias-corrected ADAM.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Optimizer state: hyperparameters, step counter and per-parameter moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        })
    }

    /// Rebuild a state from saved parts, e.g. when resuming from a checkpoint.
    pub fn from_parts(config: AdamConfig, step: u64, moments: IndexMap<String, Moments<T>>) -> Result<Self> {
        config.validate()?;
        for (name, mo) in &moments {
            if mo.m.shape() != mo.v.shape() {
                return Err(Error::shape(format!("moments of `{name}` disagree in shape")));
            }
        }
        Ok(Self { config, step, moments })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &IndexMap<String, Moments<T>> {
        &self.moments
    }

    /// One update of every `(name, param, grad)` triple; the step counter
    /// advances by exactly one per call.
    ///
    /// Shapes and finiteness of all gradients are checked before any
    /// parameter is touched.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)>,
    {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(Error::shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter has {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            if !grad.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            if let Some(mo) = self.moments.get(*name) {
                if mo.m.shape() != param.shape() {
                    return Err(Error::shape(format!(
                        "optimizer moments of `{name}` have shape {:?}, parameter has {:?}",
                        mo.m.shape(),
                        param.shape()
                    )));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let corr1 = T::lit(1.0 - c.beta1.powi(t));
        let corr2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

        for (name, param, grad) in updates {
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
            });
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
