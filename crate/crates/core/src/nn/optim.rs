use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Float, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    /// Same optimizer with a different learning rate.
    pub fn with_lr(self, lr: f64) -> Result<Self> {
        let c = match self {
            OptimizerConfig::Adam { beta1, beta2, epsilon, .. } => OptimizerConfig::Adam { lr, beta1, beta2, epsilon },
            OptimizerConfig::Sgd { momentum, .. } => OptimizerConfig::Sgd { lr, momentum },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
            } => lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0,
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
        };
        if ok && self.lr().is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-parameter moment buffers keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<F> {
    config: OptimizerConfig,
    steps: u64,
    first: BTreeMap<String, Vec<F>>,
    second: BTreeMap<String, Vec<F>>,
}

impl<F: Float> Optimizer<F> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen parameters and running statistics are left untouched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<F>>) {
        self.steps += 1;
        let t = self.steps as i32;
        for p in params {
            if !p.trainable() || p.tensor.grad().is_none() {
                continue;
            }
            let n = p.tensor.len();
            let m = self.first.entry(p.name.clone()).or_insert_with(|| vec![F::zero(); n]);
            let (values, grad) = p.tensor.values_and_grad();
            match self.config {
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let v = self.second.entry(p.name.clone()).or_insert_with(|| vec![F::zero(); n]);
                    let (b1, b2) = (F::of(beta1), F::of(beta2));
                    let c1 = F::of(1.0 - beta1.powi(t));
                    let c2 = F::of(1.0 - beta2.powi(t));
                    let (lr, eps) = (F::of(lr), F::of(epsilon));
                    for i in 0..n {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (F::one() - b1) * g;
                        v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        values[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                OptimizerConfig::Sgd { lr, momentum } => {
                    let (lr, mu) = (F::of(lr), F::of(momentum));
                    for i in 0..n {
                        m[i] = mu * m[i] + grad[i];
                        values[i] -= lr * m[i];
                    }
                }
            }
        }
    }

    /// Flattened state for checkpointing: `(name, buffer)` pairs.
    pub fn export_state(&self) -> (u64, Vec<(String, Vec<F>)>) {
        let mut out: Vec<(String, Vec<F>)> = self.first.iter().map(|(k, v)| (format!("m:{k}"), v.clone())).collect();
        out.extend(self.second.iter().map(|(k, v)| (format!("v:{k}"), v.clone())));
        (self.steps, out)
    }

    pub fn import_state(&mut self, steps: u64, buffers: Vec<(String, Vec<F>)>) -> Result<()> {
        self.steps = steps;
        self.first.clear();
        self.second.clear();
        for (key, buf) in buffers {
            match key.split_once(':') {
                Some(("m", name)) => self.first.insert(name.to_string(), buf),
                Some(("v", name)) => self.second.insert(name.to_string(), buf),
                _ => return Err(Error::Config(format!("unknown optimizer buffer {key}"))),
            };
        }
        Ok(())
    }
}
