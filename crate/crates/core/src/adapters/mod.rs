//! Low-rank adapter layers.
//!
//! A [`HydraLinear`] wraps a frozen affine map `f(x) = W₀x + b₀` (`W₀: d x k`)
//! with two optional trainable branches:
//!
//! ```text
//! h = f(x) + s·A_up A_down x + s·B_up B_down f(x)
//!            └ parallel ──┘    └ sequential ───┘
//! ```
//!
//! With only the parallel branch this is LoRA, with only the sequential branch
//! SeqLoRA. Because every branch is linear, a trained layer folds into a single
//! affine map `W = W₀ + s·A + s·BW₀`, `b = b₀ + s·Bb₀` (see [`HydraLinear::fold`]).
//!
//! Batches are row-major: `x` is `n x k` and a layer computes `x W₀ᵀ + b₀`.

mod hydra;
pub mod reference;
mod spec;

pub use hydra::{BranchNodes, HydraLinear, Linear, LowRank, MergedLinear};
pub use spec::AdapterSpec;
