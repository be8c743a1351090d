use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter (marked as requiring grad) and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        let slot = self.tensors.len();
        assert!(
            self.index.insert(name.clone(), slot).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        slot
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slot(name).map(|i| &mut self.tensors[i])
    }

    pub fn at(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn at_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction, decoupled weight decay, and per-group
/// learning-rate multipliers keyed by parameter-name prefix.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    groups: Vec<(String, f32)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            groups: Vec::new(),
        }
    }

    /// Scales the learning rate of every parameter whose name starts with
    /// `prefix`. The longest matching prefix wins.
    pub fn set_group_multiplier(&mut self, prefix: impl Into<String>, multiplier: f32) {
        let prefix = prefix.into();
        self.groups.retain(|(p, _)| *p != prefix);
        self.groups.push((prefix, multiplier));
    }

    pub fn multiplier_for(&self, name: &str) -> f32 {
        self.groups
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(1.0, |(_, m)| *m)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using each tensor's accumulated `grad`. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for slot in 0..params.len() {
            let t = params.at(slot);
            if let Some(g) = &t.grad {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} contains {bad}",
                        params.name(slot)
                    )));
                }
            }
        }
        if self.m.len() != params.len() {
            self.m = (0..params.len())
                .map(|i| vec![0.0; params.at(i).numel()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        for slot in 0..params.len() {
            let lr = c.lr * self.multiplier_for(params.name(slot));
            let t = params.at_mut(slot);
            let Some(g) = t.grad.as_ref() else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            if m.len() != t.data.len() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: vec![m.len()],
                    rhs: t.shape.clone(),
                });
            }
            for i in 0..t.data.len() {
                let gi = g[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                let p = t.data[i] * (1.0 - lr * c.weight_decay);
                t.data[i] = p - (lr as f64 * mhat / (vhat.sqrt() + c.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}
