//! Eager reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation computes its value immediately and appends a node to the
//! [`Tape`]; parents always precede children, so a single reverse walk in
//! index order is a valid backward pass. Leaves created with
//! `requires_grad = false` (frozen weights, inputs) never receive a gradient
//! and gradients are not propagated into subgraphs that only depend on them.

mod ops;
mod tape;

pub use ops::GELU_COEFF;
pub use tape::{Gradients, NodeId, Op, Tape, LAYERNORM_EPS};
