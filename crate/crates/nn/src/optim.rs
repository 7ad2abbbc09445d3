//! AdamW with decoupled weight decay.

use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Decay applies to weight matrices and
    /// kernels only, not to biases and norm scales.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let p = params.get_mut(id);
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), mi), vi) in p.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}
