//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    name: String,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Moment buffers keyed by parameter name, created on first use.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that carries a gradient. Parameters without
    /// one (frozen) are left alone. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { param: name.to_string() });
                }
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(name, t)| Moments {
                    name: name.to_string(),
                    first: vec![0.0; t.len()],
                    second: vec![0.0; t.len()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((name, t), m) in params.iter_mut().zip(&mut self.moments) {
            if m.name != *name || m.first.len() != t.len() {
                return Err(Error::Contract(format!("optimizer state for `{}` does not match `{name}`", m.name)));
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                *w -= lr * weight_decay * *w;
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g[i];
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m.first[i] / c1;
                let vhat = m.second[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
