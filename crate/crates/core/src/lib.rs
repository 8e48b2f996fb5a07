//! Hydra-style low-rank adaptation on a micro transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense matrices, the seeded generator, Jacobi SVD.
//! * [`autodiff`]: an eager reverse-mode tape over matrix nodes.
//! * [`adapters`]: [`HydraLinear`] (parallel + sequential low-rank branches),
//!   its single-branch special cases, and exact folding into one affine map.
//! * [`model`]: a pre-norm transformer encoder with a `[CLS]` head whose
//!   linear layers can be swapped for adapted ones.
//! * [`train`]: optimisers, learning-rate schedules, synthetic tasks and the
//!   pretrain / fine-tune loops.
//! * [`analysis`]: subspace similarity, PE score, parameter accounting and
//!   per-branch feature export.

pub mod adapters;
pub mod analysis;
pub mod autodiff;
mod error;
pub mod linalg;
pub mod model;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod params;
pub mod train;

pub use adapters::{AdapterSpec, HydraLinear, Linear, LowRank, MergedLinear};
pub use error::{Error, Result, Shape};
pub use linalg::{Matrix, Rng, SvdResult};
pub use model::{MicroTransformer, Mode, ModelConfig, Placement, Site};
pub use params::{ForwardCtx, Role};
