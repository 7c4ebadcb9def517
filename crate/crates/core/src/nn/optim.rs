use sha2::{Digest, Sha256};

use super::layers::Module;
use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `module` using its current
    /// gradients. Parameters are matched to optimizer state by visit order,
    /// so the same module must be passed on every call.
    pub fn step(&mut self, module: &mut dyn Module<S>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let step_size = S::of(lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let eps = S::of(self.eps);
        let decay = S::of(1.0 - lr * self.weight_decay);
        let moments = &mut self.moments;
        let mut idx = 0;
        module.visit_params_mut("", &mut |_, p| {
            if moments.len() <= idx {
                moments.push((vec![S::zero(); p.value.len()], vec![S::zero(); p.value.len()]));
            }
            let (m, v) = &mut moments[idx];
            let decays = p.rank >= 2;
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                if decays {
                    p.value[i] *= decay;
                }
                p.value[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(module: &mut dyn Module<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    module.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = S::of(max_norm / norm);
        module.visit_params_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= k));
    }
    norm
}

/// SHA-256 over every parameter and buffer, in visit order, as f64 bytes.
pub fn state_hash<S: Scalar>(module: &dyn Module<S>) -> String {
    let mut h = Sha256::new();
    module.visit_params("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in &p.value {
            h.update(v.f64().to_le_bytes());
        }
    });
    module.visit_buffers("", &mut |name, b| {
        h.update(name.as_bytes());
        for v in b {
            h.update(v.f64().to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}
