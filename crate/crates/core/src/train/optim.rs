use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// `lr0 * ½(1 + cos(π t / total))`, without warmup.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// AdamW with decoupled weight decay, applied only to parameters flagged for decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape().to_vec())).collect::<Vec<_>>();
        Self { beta1, beta2, eps, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with gradients listed in parameter order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Arity { what: "gradients", expected: self.m.len(), actual: grads.len() });
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = if params.decays(id) { self.weight_decay } else { 0.0 };
            let p = params.get_mut(id);
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x *= 1.0 - lr * decay;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
