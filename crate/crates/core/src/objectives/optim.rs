use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Real};
use crate::{Error, Result};

/// Gradients keyed by parameter name.
pub type ParamGrads<E> = HashMap<String, Vec<E>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay. Frozen parameters carry no state and
/// are never written; trainable parameters without a gradient this step
/// are skipped entirely.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn step<E: Real>(&mut self, params: &mut ParamStore<E>, grads: &ParamGrads<E>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if g.len() != p.value.len() {
                return Err(Error::shape("adamw_step", format!("gradient for `{name}` has {} entries", g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i].to_f64();
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let x = w.to_f64() * decay - lr * mhat / (vhat.sqrt() + eps);
                *w = E::from_f64(x);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` to `lr_min` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn new(lr0: f64, total: u64) -> Self {
        CosineSchedule { lr0, lr_min: 0.0, total }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.lr0;
        }
        let frac = step.min(self.total) as f64 / self.total as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Stops after `patience` consecutive validation checks without a new best.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records a validation loss; returns true if it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}
