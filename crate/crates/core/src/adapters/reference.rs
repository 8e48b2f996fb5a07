//! Standalone single-branch layers.
//!
//! These are written independently of [`HydraLinear`](super::HydraLinear) and
//! serve as the reference a Hydra layer with one branch removed must match
//! bit for bit.

use crate::autodiff::NodeId;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::params::{ForwardCtx, Role};

/// `h = W₀x + b₀ + s·A_up A_down x`
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub w0: Matrix,
    pub b0: Matrix,
    pub a_up: Matrix,
    pub a_down: Matrix,
    pub scaling: f64,
    pub dropout: f64,
}

/// `h = W₀x + b₀ + s·B_up B_down (W₀x + b₀)`
#[derive(Clone, Debug)]
pub struct SeqLoraLinear {
    pub w0: Matrix,
    pub b0: Matrix,
    pub b_up: Matrix,
    pub b_down: Matrix,
    pub scaling: f64,
    pub dropout: f64,
}

impl LoraLinear {
    pub fn forward(&self, cx: &mut ForwardCtx, name: &str, x: NodeId) -> Result<NodeId> {
        let w0 = cx.param(format!("{name}.weight"), &self.w0, Role::Frozen);
        let b0 = cx.param(format!("{name}.bias"), &self.b0, Role::Frozen);
        let h0 = cx.tape.matmul_nt(x, w0)?;
        let h0 = cx.tape.add_bias_rowwise(h0, b0)?;

        let up = cx.param(format!("{name}.a_up"), &self.a_up, Role::Adapter);
        let down = cx.param(format!("{name}.a_down"), &self.a_down, Role::Adapter);
        let xd = cx.dropout(x, self.dropout)?;
        let z = cx.tape.matmul_nt(xd, down)?;
        let delta = cx.tape.matmul_nt(z, up)?;
        let delta = cx.tape.scale(delta, self.scaling);
        cx.tape.add(h0, delta)
    }
}

impl SeqLoraLinear {
    pub fn forward(&self, cx: &mut ForwardCtx, name: &str, x: NodeId) -> Result<NodeId> {
        let w0 = cx.param(format!("{name}.weight"), &self.w0, Role::Frozen);
        let b0 = cx.param(format!("{name}.bias"), &self.b0, Role::Frozen);
        let h0 = cx.tape.matmul_nt(x, w0)?;
        let h0 = cx.tape.add_bias_rowwise(h0, b0)?;

        let up = cx.param(format!("{name}.b_up"), &self.b_up, Role::Adapter);
        let down = cx.param(format!("{name}.b_down"), &self.b_down, Role::Adapter);
        let hd = cx.dropout(h0, self.dropout)?;
        let z = cx.tape.matmul_nt(hd, down)?;
        let delta = cx.tape.matmul_nt(z, up)?;
        let delta = cx.tape.scale(delta, self.scaling);
        cx.tape.add(h0, delta)
    }
}
