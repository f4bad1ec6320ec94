//! Adam with coupled L2 weight decay and the poly learning-rate policy.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{DbdError, Result};
use crate::ops::ParamStore;

/// `base * (1 - t / total)^power`, with `t` clamped to `total`.
pub fn poly_lr(base: f64, t: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (t.min(total) as f64 / total as f64);
    base * frac.powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param` before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
    steps: usize,
}

pub struct Adam {
    slots: Vec<Slot>,
    config: AdamConfig,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Result<Self> {
        let slots = params
            .iter()
            .map(|(name, var)| {
                Ok(Slot {
                    name: name.clone(),
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                    steps: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { slots, config })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// Parameters without a gradient are left untouched, moments included.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let c = self.config;
        for slot in &mut self.slots {
            let Some(grad) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let p = slot.var.as_tensor();
            let g = if c.weight_decay != 0.0 {
                (grad + p.affine(c.weight_decay, 0.0)?)?
            } else {
                grad.clone()
            };
            slot.steps += 1;
            slot.m = (slot.m.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            slot.v = (slot.v.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let bc1 = 1.0 - c.beta1.powi(slot.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(slot.steps as i32);
            let denom = slot.v.sqrt()?.affine(1.0 / bc2.sqrt(), c.eps)?;
            let update = slot.m.div(&denom)?.affine(lr / bc1, 0.0)?;
            slot.var.set(&p.sub(&update)?)?;
        }
        Ok(())
    }

    /// Moments and step counts as `{prefix}m.{name}`, `{prefix}v.{name}`, `{prefix}t.{name}`.
    pub fn state(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            out.insert(format!("{prefix}m.{}", s.name), s.m.copy()?);
            out.insert(format!("{prefix}v.{}", s.name), s.v.copy()?);
            out.insert(
                format!("{prefix}t.{}", s.name),
                Tensor::new(&[s.steps as u32], s.m.device())?,
            );
        }
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for s in &mut self.slots {
            let get = |kind: &str| {
                tensors
                    .get(&format!("{prefix}{kind}.{}", s.name))
                    .ok_or_else(|| {
                        DbdError::Config(format!("optimizer state for {} is missing", s.name))
                    })
            };
            let m = get("m")?;
            let v = get("v")?;
            if m.dims() != s.var.dims() || v.dims() != s.var.dims() {
                return Err(DbdError::Config(format!(
                    "optimizer state for {} has the wrong shape",
                    s.name
                )));
            }
            s.m = m.to_dtype(s.var.dtype())?;
            s.v = v.to_dtype(s.var.dtype())?;
            s.steps = get("t")?.to_vec1::<u32>()?[0] as usize;
        }
        Ok(())
    }
}
