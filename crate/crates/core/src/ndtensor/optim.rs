use super::params::{ParamGroup, ParamStore};

/// SGD with classical momentum; weight decay is added to the gradient
/// before the momentum update (v = m·v + g + wd·θ, θ ← θ − lr·v).
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Option<Vec<f32>>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        SgdMomentum { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, group: ParamGroup) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for idx in 0..store.len() {
            let p = store.get_mut(super::ParamId(idx));
            if p.group != group {
                continue;
            }
            let v = self.velocity[idx].get_or_insert_with(|| vec![0.0; p.data.len()]);
            for i in 0..p.data.len() {
                let g = p.grad[i] + self.weight_decay * p.data[i];
                v[i] = self.momentum * v[i] + g;
                p.data[i] -= self.lr * v[i];
            }
        }
    }
}

/// Adam with bias correction; `weight_decay` of 0 matches the paper's
/// "Adam optimizer with no weight decay".
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, group: ParamGroup) {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..store.len() {
            let p = store.get_mut(super::ParamId(idx));
            if p.group != group {
                continue;
            }
            let m = self.m[idx].get_or_insert_with(|| vec![0.0; p.data.len()]);
            let v = self.v[idx].get_or_insert_with(|| vec![0.0; p.data.len()]);
            for i in 0..p.data.len() {
                let g = p.grad[i] + self.weight_decay * p.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
