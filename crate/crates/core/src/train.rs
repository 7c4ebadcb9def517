//! Schedules, shuffling and per-epoch logs shared by the training stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synthworld::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `lr_decay`.
    pub decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(12, 8, 1e-3)
    }
}

impl Schedule {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self { epochs, batch_size, lr, decay_epochs: Vec::new(), lr_decay: 0.1, weight_decay: 0.01, grad_clip: 35.0 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err("learning rate, decay and clipping must be positive and finite".into());
        }
        Ok(())
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5348_5546, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// Mean training losses of one epoch, by component name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: Vec<(String, f64)>,
}

/// Accumulates per-batch loss components into epoch means.
#[derive(Clone, Debug, Default)]
pub struct LossMeter {
    sums: Vec<(String, f64)>,
    total: f64,
    batches: usize,
}

impl LossMeter {
    pub fn add(&mut self, total: f64, components: &[(&str, f64)]) {
        self.total += total;
        self.batches += 1;
        for &(name, v) in components {
            match self.sums.iter_mut().find(|(n, _)| n == name) {
                Some(e) => e.1 += v,
                None => self.sums.push((name.to_string(), v)),
            }
        }
    }

    pub fn finish(self, epoch: usize, lr: f64) -> EpochLog {
        let k = self.batches.max(1) as f64;
        EpochLog {
            epoch,
            lr,
            loss: self.total / k,
            components: self.sums.into_iter().map(|(n, v)| (n, v / k)).collect(),
        }
    }
}
