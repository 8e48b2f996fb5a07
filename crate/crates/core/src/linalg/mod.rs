//! Dense matrices, the seeded generator, and the singular value decomposition
//! the rest of the crate is built on.

mod matrix;
mod rng;
mod svd;

pub use matrix::{frobenius_norm_sq, matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{gaussian, Rng};
pub use svd::{svd, SvdResult, SVD_MAX_SWEEPS, SVD_TOLERANCE};
