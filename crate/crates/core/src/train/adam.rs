use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::config::AdamConfig;
use crate::error::{Error, Result};
use crate::nets::ParamStore;

/// Adam with bias correction. Moments are keyed by parameter name so they
/// can be checkpointed alongside the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.vars() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            lr,
            cfg,
            step: 0,
            m,
            v,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. With a zero
    /// learning rate the moments advance but parameters stay untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = self.m.get_mut(name).expect("moment per parameter");
            *m = ((m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?).detach();
            let v = self.v.get_mut(name).expect("moment per parameter");
            *v = ((v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?).detach();
            if self.lr == 0.0 {
                continue;
            }
            let m_hat = m.affine(1.0 / c1, 0.0)?;
            let denom = v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, self.cfg.eps)?;
            let update = (m_hat / denom)?.affine(self.lr, 0.0)?;
            var.set(&(var.as_tensor() - update)?.detach())?;
        }
        Ok(())
    }

    /// Moments as `m.<name>` / `v.<name>` tensors.
    pub fn state(&self) -> impl Iterator<Item = (String, &Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("m.{k}"), t));
        let v = self.v.iter().map(|(k, t)| (format!("v.{k}"), t));
        m.chain(v)
    }

    pub fn restore(&mut self, step: u64, mut get: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (prefix, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (name, slot) in map.iter_mut() {
                let key = format!("{prefix}.{name}");
                let t = get(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has the wrong shape")));
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
