//! Training-loop bookkeeping shared by both trainable stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Tracks a metric to maximize; signals a stop after `patience` epochs
/// without an improvement larger than `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: None, best_epoch: 0, stale: 0 }
    }

    /// Records `value` for `epoch`; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some(b) if value <= b + self.min_delta => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some(value);
                self.best_epoch = epoch;
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement of a maximized metric.
#[derive(Clone, Debug)]
pub struct ReduceLrOnPlateau {
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: Option<f64>,
    stale: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self { factor, patience, min_lr, best: None, stale: 0 }
    }

    /// Returns the learning rate to use for the next epoch.
    pub fn step(&mut self, value: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if value <= b => {
                self.stale += 1;
                if self.stale > self.patience {
                    self.stale = 0;
                    return (lr * self.factor).max(self.min_lr);
                }
                lr
            }
            _ => {
                self.best = Some(value);
                self.stale = 0;
                lr
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    /// Validation metrics by name, e.g. `accuracy`, `f1`, `mean_iou`.
    pub val: std::collections::BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Loss of the very first optimization step.
    pub first_batch_loss: Option<f64>,
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
