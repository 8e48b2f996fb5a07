use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Branch structure of an adapted layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSpec {
    /// Rank of the parallel branch (`0` = absent).
    pub parallel_rank: usize,
    /// Rank of the sequential branch (`0` = absent).
    pub sequential_rank: usize,
    /// Std of the Gaussian used for the down-projections.
    pub init_sigma: f64,
    /// Dropout on each branch input, training only.
    pub adapter_dropout: f64,
    /// Multiplier on each branch output. No `α/r` normalisation is implied.
    pub scaling: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self::hydra(4)
    }
}

impl AdapterSpec {
    pub fn new(parallel_rank: usize, sequential_rank: usize) -> Self {
        Self {
            parallel_rank,
            sequential_rank,
            init_sigma: 0.02,
            adapter_dropout: 0.0,
            scaling: 1.0,
        }
    }

    /// No branches: the layer stays a frozen affine map.
    pub fn none() -> Self {
        Self::new(0, 0)
    }

    pub fn lora(rank: usize) -> Self {
        Self::new(rank, 0)
    }

    pub fn seq_lora(rank: usize) -> Self {
        Self::new(0, rank)
    }

    /// Both branches at half the budget each, `r_a = r_b = r/2`, which keeps
    /// the parameter count of a rank-`r` single-branch adapter on square layers.
    pub fn hydra(rank: usize) -> Self {
        Self::new(rank / 2, rank / 2)
    }

    pub fn is_identity(&self) -> bool {
        self.parallel_rank == 0 && self.sequential_rank == 0
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.init_sigma = sigma;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.adapter_dropout = p;
        self
    }

    pub fn with_scaling(mut self, s: f64) -> Self {
        self.scaling = s;
        self
    }

    /// Checks the spec against a layer with `d` outputs and `k` inputs.
    pub fn validate(&self, d: usize, k: usize) -> Result<()> {
        if self.parallel_rank > d.min(k) {
            return Err(contract(format!(
                "parallel rank {} exceeds min(d, k) = {}",
                self.parallel_rank,
                d.min(k)
            )));
        }
        if self.sequential_rank > d {
            return Err(contract(format!(
                "sequential rank {} exceeds d = {d}",
                self.sequential_rank
            )));
        }
        self.validate_scalars()
    }

    pub fn validate_scalars(&self) -> Result<()> {
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(contract(format!("init_sigma {} must be finite and >= 0", self.init_sigma)));
        }
        if !(0.0..1.0).contains(&self.adapter_dropout) {
            return Err(contract(format!("adapter_dropout {} outside [0, 1)", self.adapter_dropout)));
        }
        if !self.scaling.is_finite() {
            return Err(contract("scaling must be finite"));
        }
        Ok(())
    }

    /// Trainable parameters this spec adds to a `d x k` layer:
    /// `r_a (d + k) + r_b (2d)`.
    pub fn param_count(&self, d: usize, k: usize) -> usize {
        self.parallel_rank * (d + k) + self.sequential_rank * 2 * d
    }
}
