use std::collections::BTreeMap;

use log::warn;

use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// One learnable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Vec<Float>,
    pub first_moment: Vec<Float>,
    pub second_moment: Vec<Float>,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        ParamEntry {
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// Named learnable parameters plus non-learnable buffers (batch-norm
/// running statistics). Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, ParamEntry>,
    buffers: BTreeMap<String, Tensor>,
    step: u64,
    pending_grad: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), ParamEntry::new(value));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&[Float]> {
        Ok(&self.entry(name)?.grad)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|e| e.value.len()).sum()
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[Float]) -> Result<()> {
        let entry = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if grad.len() != entry.grad.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: entry.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        for (a, &g) in entry.grad.iter_mut().zip(grad) {
            *a += g;
        }
        self.pending_grad = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.params.values_mut() {
            e.grad.fill(0.0);
        }
        self.pending_grad = false;
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            ..Self::default()
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Returns `false` (and leaves the store untouched) when no gradient has
    /// been accumulated since the last step.
    pub fn step(&self, store: &mut ParamStore) -> bool {
        if !store.pending_grad {
            warn!("adam step skipped: no gradients accumulated");
            return false;
        }
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for e in store.params.values_mut() {
            let values = e.value.data_mut();
            for i in 0..values.len() {
                let g = e.grad[i] as f64;
                let m = self.beta1 * e.first_moment[i] as f64 + (1.0 - self.beta1) * g;
                let v = self.beta2 * e.second_moment[i] as f64 + (1.0 - self.beta2) * g * g;
                e.first_moment[i] = m as Float;
                e.second_moment[i] = v as Float;
                let update = self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon);
                values[i] = (values[i] as f64 - update) as Float;
            }
        }
        store.zero_grad();
        true
    }
}
