//! Named parameter store and the Adam optimizer.
//!
//! Parameters live under string paths (`level0.enc1.itmm.qkv.weight`, ...);
//! per-level parameters use `level{i}.` prefixes and weight-shared ones use
//! `shared.`. Iteration is always in sorted-name order, which is what makes
//! gradient accumulation and optimizer updates bit-reproducible.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::tape::Precision;
use crate::Result;

/// One named tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Populated by the reverse pass; `None` until then.
    pub grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sorted map from parameter path to tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Parameter>,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore { entries: BTreeMap::new(), rng_seed }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` already exists")));
        }
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Dimension(format!(
                "parameter `{name}`: shape {shape:?} wants {expect} values, got {}",
                values.len()
            )));
        }
        self.entries.insert(name.to_string(), Parameter { shape, values, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Sorted-by-name iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Parameter::len).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        if g.len() != p.values.len() {
            return Err(Error::Dimension(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                p.values.len()
            )));
        }
        match &mut p.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => p.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Mark a parameter as reached by a reverse pass that contributed nothing.
    pub(crate) fn accumulate_zero_grad(&mut self, name: &str) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.is_none() {
            p.grad = Some(vec![0.0; p.values.len()]);
        }
        Ok(())
    }

    /// Scale every populated gradient, e.g. by 1/batch.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.entries.values_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    /// Drop all gradient buffers.
    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }
}

/// Adam optimizer state: per-parameter first/second moments plus the step
/// counter, with bias correction applied at every step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, p) in store.iter() {
            m.insert(name.clone(), vec![0.0; p.len()]);
            v.insert(name.clone(), vec![0.0; p.len()]);
        }
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }
}

/// One Adam update over every parameter of the store, in sorted-name order.
/// Gradients are read but not modified; the caller zeroes them afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, precision: Precision) -> Result<()> {
    state.step += 1;
    let bc1 = 1.0 - libm::pow(state.beta1, state.step as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, state.step as f64);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let p = store.get_mut(&name)?;
        let g = p
            .grad
            .clone()
            .ok_or_else(|| Error::Contract(format!("adam_step: parameter `{name}` has no gradient")))?;
        let m = state
            .m
            .get_mut(&name)
            .ok_or_else(|| Error::Contract(format!("adam_step: no moment buffer for `{name}`")))?;
        let v = state
            .v
            .get_mut(&name)
            .ok_or_else(|| Error::Contract(format!("adam_step: no moment buffer for `{name}`")))?;
        for i in 0..p.values.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let next = p.values[i] - state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
            p.values[i] = precision.quantize(next);
            m[i] = precision.quantize(m[i]);
            v[i] = precision.quantize(v[i]);
            if !p.values[i].is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
    }
    Ok(())
}
