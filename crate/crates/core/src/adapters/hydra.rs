use serde::{Deserialize, Serialize};

use super::AdapterSpec;
use crate::autodiff::NodeId;
use crate::error::{contract, Error, Result};
use crate::linalg::{gaussian, matmul, matmul_nt, Matrix, Rng};
use crate::params::{ForwardCtx, Role};

/// Plain affine map `x Wᵀ + b` with `w: d x k`, `b: 1 x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

/// The single affine map a [`HydraLinear`] folds into.
pub type MergedLinear = Linear;

impl Linear {
    pub fn new(w: Matrix, b: Matrix) -> Result<Self> {
        if b.rows() != 1 || b.cols() != w.rows() {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: w.shape(),
                rhs: b.shape(),
            });
        }
        Ok(Self { w, b })
    }

    pub fn out_features(&self) -> usize {
        self.w.rows()
    }

    pub fn in_features(&self) -> usize {
        self.w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Evaluates `x Wᵀ + b` directly on values.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul_nt(x, &self.w)?;
        for r in 0..y.rows() {
            for (o, b) in y.row_mut(r).iter_mut().zip(self.b.as_slice()) {
                *o += b;
            }
        }
        Ok(y)
    }

    pub fn forward(&self, cx: &mut ForwardCtx, name: &str, role: Role, x: NodeId) -> Result<NodeId> {
        let w = cx.param(format!("{name}.weight"), &self.w, role);
        let b = cx.param(format!("{name}.bias"), &self.b, role);
        let y = cx.tape.matmul_nt(x, w)?;
        cx.tape.add_bias_rowwise(y, b)
    }
}

/// One low-rank branch `up · down`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    pub up: Matrix,
    pub down: Matrix,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn dense(&self) -> Matrix {
        matmul(&self.up, &self.down).expect("low-rank factors share their inner dimension")
    }

    pub fn param_count(&self) -> usize {
        self.up.len() + self.down.len()
    }
}

/// Frozen linear layer with optional parallel and sequential low-rank branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HydraLinear {
    pub w0: Matrix,
    pub b0: Matrix,
    /// `A_up: d x r_a`, `A_down: r_a x k`.
    pub parallel: Option<LowRank>,
    /// `B_up: d x r_b`, `B_down: r_b x d`.
    pub sequential: Option<LowRank>,
    pub spec: AdapterSpec,
}

/// Nodes produced by [`HydraLinear::forward_train`].
#[derive(Clone, Copy, Debug)]
pub struct BranchNodes {
    pub output: NodeId,
    /// `f(x) = x W₀ᵀ + b₀`.
    pub pretrained: NodeId,
    /// `s · A_up A_down x`, if the branch is present and active.
    pub parallel: Option<NodeId>,
    /// `s · B_up B_down f(x)`, if the branch is present and active.
    pub sequential: Option<NodeId>,
}

impl HydraLinear {
    /// Copies the frozen part and draws `A_down`, then `B_down`, from
    /// `N(0, init_sigma²)`; both up-projections start at zero so the layer
    /// initially computes exactly `f(x)`.
    pub fn init(w0: Matrix, b0: Matrix, spec: AdapterSpec, rng: &mut Rng) -> Result<Self> {
        let base = Linear::new(w0, b0)?;
        let (d, k) = (base.out_features(), base.in_features());
        spec.validate(d, k)?;
        let parallel = (spec.parallel_rank > 0).then(|| LowRank {
            up: Matrix::zeros(d, spec.parallel_rank),
            down: gaussian(rng, spec.parallel_rank, k, spec.init_sigma),
        });
        let sequential = (spec.sequential_rank > 0).then(|| LowRank {
            up: Matrix::zeros(d, spec.sequential_rank),
            down: gaussian(rng, spec.sequential_rank, d, spec.init_sigma),
        });
        Ok(Self {
            w0: base.w,
            b0: base.b,
            parallel,
            sequential,
            spec,
        })
    }

    pub fn out_features(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_features(&self) -> usize {
        self.w0.cols()
    }

    pub fn base(&self) -> Linear {
        Linear {
            w: self.w0.clone(),
            b: self.b0.clone(),
        }
    }

    /// Training-mode forward pass. Adapter dropout is applied to `x` before
    /// the parallel branch and to `f(x)` before the sequential branch.
    /// Parameters are bound as `{name}.weight`, `{name}.bias`,
    /// `{name}.a_up`, `{name}.a_down`, `{name}.b_up`, `{name}.b_down`.
    pub fn forward_train(&self, cx: &mut ForwardCtx, name: &str, x: NodeId) -> Result<BranchNodes> {
        let k = cx.tape.value(x).cols();
        if k != self.in_features() {
            return Err(Error::Shape {
                op: "hydra forward",
                lhs: cx.tape.value(x).shape(),
                rhs: self.w0.shape(),
            });
        }
        let w0 = cx.param(format!("{name}.weight"), &self.w0, Role::Frozen);
        let b0 = cx.param(format!("{name}.bias"), &self.b0, Role::Frozen);
        let wx = cx.tape.matmul_nt(x, w0)?;
        let f = cx.tape.add_bias_rowwise(wx, b0)?;

        let mut out = f;
        let mut parallel = None;
        let mut sequential = None;
        if cx.use_adapters {
            if let Some(a) = &self.parallel {
                let up = cx.param(format!("{name}.a_up"), &a.up, Role::Adapter);
                let down = cx.param(format!("{name}.a_down"), &a.down, Role::Adapter);
                let xin = cx.dropout(x, self.spec.adapter_dropout)?;
                let g = branch(cx, xin, down, up, self.spec.scaling)?;
                out = cx.tape.add(out, g)?;
                parallel = Some(g);
            }
            if let Some(b) = &self.sequential {
                let up = cx.param(format!("{name}.b_up"), &b.up, Role::Adapter);
                let down = cx.param(format!("{name}.b_down"), &b.down, Role::Adapter);
                let fin = cx.dropout(f, self.spec.adapter_dropout)?;
                let g = branch(cx, fin, down, up, self.spec.scaling)?;
                out = cx.tape.add(out, g)?;
                sequential = Some(g);
            }
        }
        Ok(BranchNodes {
            output: out,
            pretrained: f,
            parallel,
            sequential,
        })
    }

    /// Eval-mode (dropout off) three-branch forward on plain values.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        let mut cx = ForwardCtx::eval();
        let xn = cx.tape.constant(x.clone());
        let nodes = self.forward_train(&mut cx, "layer", xn)?;
        Ok(cx.tape.value(nodes.output).clone())
    }

    /// `(A, BW₀)`: the unscaled dense updates of the parallel and sequential
    /// branches, zero when a branch is absent.
    pub fn effective_updates(&self) -> (Matrix, Matrix) {
        let (d, k) = (self.out_features(), self.in_features());
        let a = self
            .parallel
            .as_ref()
            .map_or_else(|| Matrix::zeros(d, k), LowRank::dense);
        let bw0 = self.sequential.as_ref().map_or_else(
            || Matrix::zeros(d, k),
            |b| matmul(&b.dense(), &self.w0).expect("B is d x d"),
        );
        (a, bw0)
    }

    /// Folds both branches into the frozen weights:
    /// `W = W₀ + s·A + s·BW₀`, `b = b₀ + s·Bb₀`.
    pub fn fold(&self) -> MergedLinear {
        let s = self.spec.scaling;
        let mut w = self.w0.clone();
        let mut b = self.b0.clone();
        if let Some(a) = &self.parallel {
            w.add_assign(&a.dense().scale(s)).expect("A is d x k");
        }
        if let Some(seq) = &self.sequential {
            let bm = seq.dense();
            w.add_assign(&matmul(&bm, &self.w0).expect("B is d x d").scale(s))
                .expect("BW0 is d x k");
            // Bb₀ as a row: b₀ Bᵀ.
            let bb0 = matmul_nt(&self.b0, &bm).expect("b0 is 1 x d");
            b.add_assign(&bb0.scale(s)).expect("Bb0 is 1 x d");
        }
        Linear { w, b }
    }

    /// `r_a (d + k) + r_b (2d)`.
    pub fn trainable_param_count(&self) -> usize {
        self.parallel.as_ref().map_or(0, LowRank::param_count)
            + self.sequential.as_ref().map_or(0, LowRank::param_count)
    }

    pub fn is_finite(&self) -> bool {
        self.w0.is_finite()
            && self.b0.is_finite()
            && [&self.parallel, &self.sequential]
                .into_iter()
                .flatten()
                .all(|lr| lr.up.is_finite() && lr.down.is_finite())
    }

    /// Replaces the up-projections of the present branches, moving the layer
    /// away from its zero initialisation.
    pub fn set_up_projections(&mut self, a_up: Option<Matrix>, b_up: Option<Matrix>) -> Result<()> {
        for (slot, value) in [(&mut self.parallel, a_up), (&mut self.sequential, b_up)] {
            if let Some(v) = value {
                let lr = slot
                    .as_mut()
                    .ok_or_else(|| contract("cannot set up-projection of an absent branch"))?;
                lr.up.expect_same_shape(&v, "set_up_projection")?;
                lr.up = v;
            }
        }
        Ok(())
    }
}

/// `s · (input · downᵀ) · upᵀ`
fn branch(cx: &mut ForwardCtx, input: NodeId, down: NodeId, up: NodeId, s: f64) -> Result<NodeId> {
    let z = cx.tape.matmul_nt(input, down)?;
    let g = cx.tape.matmul_nt(z, up)?;
    Ok(cx.tape.scale(g, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> HydraLinear {
        // W₀ = I, b₀ = 0, A_up = [1,0]ᵀ, A_down = [0,1], B_up = [0,1]ᵀ, B_down = [1,0]
        HydraLinear {
            w0: Matrix::identity(2),
            b0: Matrix::zeros(1, 2),
            parallel: Some(LowRank {
                up: Matrix::column_vector(&[1.0, 0.0]),
                down: Matrix::row_vector(&[0.0, 1.0]),
            }),
            sequential: Some(LowRank {
                up: Matrix::column_vector(&[0.0, 1.0]),
                down: Matrix::row_vector(&[1.0, 0.0]),
            }),
            spec: AdapterSpec::new(1, 1),
        }
    }

    #[test]
    fn hand_example_forward_and_fold() {
        let layer = toy();
        let x = Matrix::row_vector(&[1.0, 2.0]);
        assert_eq!(layer.forward_eval(&x).unwrap(), Matrix::row_vector(&[3.0, 3.0]));

        let merged = layer.fold();
        assert_eq!(merged.w, Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]));
        assert_eq!(merged.b, Matrix::zeros(1, 2));
        assert_eq!(merged.apply(&x).unwrap(), Matrix::row_vector(&[3.0, 3.0]));

        let (a, bw0) = layer.effective_updates();
        assert_eq!(a, Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]));
        assert_eq!(bw0, Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]));
    }

    #[test]
    fn zero_init_is_the_frozen_map() {
        let mut rng = Rng::new(3);
        let w0 = rng.gaussian_matrix(5, 4, 1.0);
        let b0 = rng.gaussian_matrix(1, 5, 1.0);
        let layer = HydraLinear::init(w0.clone(), b0.clone(), AdapterSpec::new(2, 2), &mut rng).unwrap();
        let x = rng.gaussian_matrix(3, 4, 1.0);
        let base = Linear::new(w0.clone(), b0.clone()).unwrap();
        assert_eq!(layer.forward_eval(&x).unwrap(), base.apply(&x).unwrap());
        let merged = layer.fold();
        assert_eq!(merged.w, w0);
        assert_eq!(merged.b, b0);
        let (a, bw0) = layer.effective_updates();
        assert_eq!(a.max_abs(), 0.0);
        assert_eq!(bw0.max_abs(), 0.0);
    }

    #[test]
    fn no_branches_means_no_trainables() {
        let mut rng = Rng::new(1);
        let layer = HydraLinear::init(Matrix::identity(3), Matrix::zeros(1, 3), AdapterSpec::none(), &mut rng)
            .unwrap();
        assert!(layer.parallel.is_none() && layer.sequential.is_none());
        assert_eq!(layer.trainable_param_count(), 0);
    }

    #[test]
    fn rank_limits_are_enforced() {
        let mut rng = Rng::new(1);
        let w0 = Matrix::zeros(3, 5);
        let b0 = Matrix::zeros(1, 3);
        assert!(HydraLinear::init(w0.clone(), b0.clone(), AdapterSpec::new(4, 0), &mut rng).is_err());
        assert!(HydraLinear::init(w0.clone(), b0.clone(), AdapterSpec::new(0, 4), &mut rng).is_err());
        assert!(HydraLinear::init(w0, b0, AdapterSpec::new(3, 3), &mut rng).is_ok());
    }

    #[test]
    fn bias_shape_is_checked() {
        let mut rng = Rng::new(1);
        assert!(HydraLinear::init(Matrix::zeros(3, 2), Matrix::zeros(1, 2), AdapterSpec::none(), &mut rng).is_err());
    }

    #[test]
    fn param_count_formula() {
        let mut rng = Rng::new(1);
        let layer = HydraLinear::init(Matrix::zeros(6, 10), Matrix::zeros(1, 6), AdapterSpec::new(2, 3), &mut rng)
            .unwrap();
        assert_eq!(layer.trainable_param_count(), 2 * (6 + 10) + 3 * 12);
        assert_eq!(AdapterSpec::new(2, 2).param_count(768, 3072), 10752);
    }

    #[test]
    fn input_width_mismatch_is_a_shape_error() {
        let layer = toy();
        assert!(matches!(
            layer.forward_eval(&Matrix::zeros(1, 3)),
            Err(Error::Shape { .. })
        ));
    }
}
