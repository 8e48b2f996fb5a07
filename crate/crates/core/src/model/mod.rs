//! Pre-norm transformer encoder with a `[CLS]` classification head and
//! per-site adapter placement.

mod config;
mod transformer;

pub use config::{ModelConfig, ParamSpec, Placement, Site, CLS_TOKEN};
pub use transformer::{BranchFeatures, Layer, LayerNorm, MicroTransformer, Mode, ModelOutput, TransformerBlock};
