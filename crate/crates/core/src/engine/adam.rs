use super::params::ParamStore;
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over the parameters of a store whose names pass a
/// filter. Moments are kept in store order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    members: Vec<usize>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, member: impl Fn(&str) -> bool) -> Self {
        let mut members = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (i, (name, t)) in store.iter().enumerate() {
            if member(name) {
                members.push(i);
                m.push(Tensor::zeros(t.shape().to_vec()));
                v.push(Tensor::zeros(t.shape().to_vec()));
            }
        }
        Self { config, step: 0, members, m, v }
    }

    /// Store indices owned by this optimizer.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// One update. `grads[i]` is the gradient of the i-th store entry.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let one = T::one();
        let mut params: Vec<&mut Tensor<T>> = store.iter_mut().map(|(_, t)| t).collect();
        for (slot, &idx) in self.members.iter().enumerate() {
            let p = params[idx].data_mut();
            let g = &grads[idx];
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
