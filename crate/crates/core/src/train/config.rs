use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then flat.
    Constant,
    /// Linear warmup, then half-cosine decay to zero.
    CosineWarmup,
    /// Linear warmup, then linear decay to zero.
    LinearWarmupDecay,
}

/// Warmup length, resolved to optimiser steps once the epoch size is known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Steps(usize),
    Epochs(usize),
    /// Fraction of the total step count, rounded down.
    Ratio(f64),
}

impl Warmup {
    pub fn steps(self, steps_per_epoch: usize, total_steps: usize) -> usize {
        match self {
            Warmup::Steps(s) => s,
            Warmup::Epochs(e) => e * steps_per_epoch,
            Warmup::Ratio(r) => (r * total_steps as f64).floor() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
    /// AdamW only.
    pub betas: [f64; 2],
    /// AdamW only.
    pub eps: f64,
    pub schedule: Schedule,
    pub warmup: Warmup,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Dropout on the MLP hidden activations.
    pub dropout: f64,
    pub train_examples: usize,
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune_default()
    }
}

impl TrainConfig {
    /// Recipe for training the base model on the source task.
    pub fn pretrain_default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            lr: 3e-3,
            weight_decay: 0.0,
            momentum: 0.9,
            betas: [0.9, 0.999],
            eps: 1e-8,
            schedule: Schedule::CosineWarmup,
            warmup: Warmup::Epochs(1),
            epochs: 6,
            batch_size: 32,
            seed: 0,
            dropout: 0.0,
            train_examples: 1024,
            eval_examples: 512,
        }
    }

    /// Recipe for adapter fine-tuning on the shifted target task.
    pub fn finetune_default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            lr: 2e-2,
            weight_decay: 1e-4,
            momentum: 0.9,
            betas: [0.9, 0.999],
            eps: 1e-8,
            schedule: Schedule::CosineWarmup,
            warmup: Warmup::Epochs(1),
            epochs: 10,
            batch_size: 32,
            seed: 0,
            dropout: 0.0,
            train_examples: 512,
            eval_examples: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(contract(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(contract("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract("dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.betas[0]) || !(0.0..1.0).contains(&self.betas[1]) {
            return Err(contract("betas must lie in [0, 1)"));
        }
        if self.epochs > 0 && self.train_examples == 0 {
            return Err(contract("train_examples must be >= 1"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}
