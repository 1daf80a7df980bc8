use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Which optimizer (if any) owns a parameter. Buffers (batchnorm running
/// stats) are checkpointed but never stepped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Weight,
    Arch,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
    pub group: ParamGroup,
}

/// Owns every parameter and buffer of a network, addressed by stable ids.
/// Names are unique and hierarchical ("cells.0.edge3.op2.bn.gamma") so
/// checkpoints can be reloaded into a freshly built network.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::arg("param_store", format!("duplicate parameter name {name:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "param_store",
                format!("{name:?}: shape {shape:?} does not match {} values", data.len()),
            ));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, shape, grad: vec![0.0; n], data, group });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f32]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.len(), g.len());
        for (a, &b) in p.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Sum of squared gradients over one group; the trainer logs the root.
    pub fn grad_sq_norm(&self, group: ParamGroup) -> f64 {
        let mut acc = 0.0f64;
        for p in &self.params {
            if p.group == group {
                for &g in &p.grad {
                    acc += g as f64 * g as f64;
                }
            }
        }
        acc
    }

    /// Number of stored f32 values in a group (params + buffers has its own
    /// meaning for cost accounting; this counts one group only).
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.data.len()).sum()
    }
}

/// He-style init for conv/linear weights: N(0, sqrt(2 / fan_in)).
pub(crate) fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    (0..n).map(|_| normal(rng) * std).collect()
}

/// Box–Muller over the seeded stream; two uniforms per draw keeps the
/// consumption pattern fixed.
fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}
