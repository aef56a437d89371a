use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    lower_bound: Option<f64>,
}

/// Named parameters with per-parameter Adam state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredParams {
    format_version: u32,
    params: BTreeMap<String, StoredParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let n = value.len();
        self.slots.insert(
            name.to_string(),
            Slot { value, m: vec![0.0; n], v: vec![0.0; n], step: 0, lower_bound: None },
        );
    }

    /// Keeps the parameter at or above `bound` after every optimizer step.
    pub fn set_lower_bound(&mut self, name: &str, bound: f64) -> Result<()> {
        let slot = self.slots.get_mut(name).ok_or_else(|| NnError::UnknownParam(name.into()))?;
        slot.lower_bound = Some(bound);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots.get(name).map(|s| &s.value).ok_or_else(|| NnError::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value).ok_or_else(|| NnError::UnknownParam(name.into()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Places a parameter on the tape as a named leaf.
    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?.clone()))
    }

    /// Places a parameter on the tape as a constant (no gradient).
    pub fn frozen(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.constant(self.get(name)?.clone()))
    }

    /// One Adam step over every parameter that received a gradient.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads.params() {
            if !g.all_finite() {
                return Err(NnError::NonFiniteGradient(name.clone()));
            }
            let slot = self.slots.get(name).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            if slot.value.shape != g.shape {
                return Err(NnError::Shape {
                    op: "adam_step",
                    detail: format!("`{name}` is {:?}, gradient {:?}", slot.value.shape, g.shape),
                });
            }
        }
        for (name, g) in grads.params() {
            let slot = self.slots.get_mut(name).expect("checked above");
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for k in 0..g.len() {
                let gk = g.data[k];
                slot.m[k] = cfg.beta1 * slot.m[k] + (1.0 - cfg.beta1) * gk;
                slot.v[k] = cfg.beta2 * slot.v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mhat = slot.m[k] / bc1;
                let vhat = slot.v[k] / bc2;
                slot.value.data[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            if let Some(lb) = slot.lower_bound {
                slot.value.data.iter_mut().for_each(|v| *v = v.max(lb));
            }
        }
        Ok(())
    }

    /// Polyak averaging `self <- tau * src + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, src: &ParamStore, tau: f64) -> Result<()> {
        self.check_compatible(src)?;
        for (name, slot) in self.slots.iter_mut() {
            let s = &src.slots[name].value;
            for (t, &v) in slot.value.data.iter_mut().zip(&s.data) {
                *t = tau * v + (1.0 - tau) * *t;
            }
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(NnError::Shape { op: "params", detail: "parameter sets differ".into() });
        }
        for (name, slot) in &self.slots {
            match other.slots.get(name) {
                Some(o) if o.value.shape == slot.value.shape => {}
                Some(o) => {
                    return Err(NnError::Shape {
                        op: "params",
                        detail: format!("`{name}`: {:?} vs {:?}", slot.value.shape, o.value.shape),
                    })
                }
                None => return Err(NnError::UnknownParam(name.clone())),
            }
        }
        Ok(())
    }

    /// Copy of the values with fresh optimizer state.
    pub fn values_only(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, slot) in &self.slots {
            out.insert(name, slot.value.clone());
            out.slots.get_mut(name).unwrap().lower_bound = slot.lower_bound;
        }
        out
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let stored = StoredParams {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params: self
                .slots
                .iter()
                .map(|(k, s)| (k.clone(), StoredParam { shape: s.value.shape.clone(), values: s.value.data.clone() }))
                .collect(),
        };
        serde_json::to_value(stored).expect("params serialize")
    }

    pub fn from_json_value(v: serde_json::Value) -> Result<Self> {
        let stored: StoredParams = serde_json::from_value(v)?;
        if stored.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                stored.format_version
            )));
        }
        let mut out = ParamStore::new();
        for (name, p) in stored.params {
            if p.shape.len() != 2 || p.shape[0] * p.shape[1] != p.values.len() {
                return Err(NnError::Checkpoint(format!("`{name}` has inconsistent shape {:?}", p.shape)));
            }
            out.insert(&name, Tensor { shape: p.shape, data: p.values });
        }
        Ok(out)
    }

    /// Restores values from a checkpoint into this store, keeping bounds.
    pub fn load_values(&mut self, loaded: &ParamStore) -> Result<()> {
        self.check_compatible(loaded)?;
        for (name, slot) in self.slots.iter_mut() {
            slot.value = loaded.slots[name].value.clone();
            slot.m.iter_mut().for_each(|v| *v = 0.0);
            slot.v.iter_mut().for_each(|v| *v = 0.0);
            slot.step = 0;
        }
        Ok(())
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor { shape: vec![rows, cols], data }
}
