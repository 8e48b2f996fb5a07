use super::tape::{NodeId, Op, Tape, LAYERNORM_EPS};
use crate::error::{contract, Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix, Rng};

/// Cubic coefficient of the tanh GELU approximation
/// `0.5 x (1 + tanh(sqrt(2/π) (x + 0.044715 x³)))`.
pub const GELU_COEFF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn check_row_vector(op: &'static str, x: &Matrix, v: &Matrix) -> Result<()> {
    if v.rows() != 1 || v.cols() != x.cols() {
        return Err(shape_err(op, x, v));
    }
    Ok(())
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (acc, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    out
}

impl Tape {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul, vec![a, b]))
    }

    /// `a · bᵀ`; the natural form of a linear layer on row-major batches.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNt, vec![a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add, vec![a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul, vec![a, b]))
    }

    /// Adds the `1 x c` vector `bias` to every row of `x`.
    pub fn add_bias_rowwise(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        check_row_vector("add_bias_rowwise", xv, bv)?;
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowVector, vec![x, bias]))
    }

    /// Multiplies every row of `x` elementwise by the `1 x c` vector `gain`.
    pub fn mul_rowwise(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gain));
        check_row_vector("mul_rowwise", xv, gv)?;
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, g) in out.row_mut(r).iter_mut().zip(gv.as_slice()) {
                *o *= g;
            }
        }
        Ok(self.push(out, Op::MulRowVector, vec![x, gain]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(0.0));
        self.push(v, Op::Relu, vec![x])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu, vec![x])
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows, vec![x])
    }

    pub fn layernorm_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNormRows { inv_std }, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(s), vec![x])
    }

    /// Inverted dropout. Identity (no node recorded) when not training or
    /// when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut Rng, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask = Matrix::from_fn(xv.rows(), xv.cols(), |_, _| {
            if rng.next_f64() < p {
                0.0
            } else {
                keep
            }
        });
        let v = xv.hadamard(&mask)?;
        Ok(self.push(v, Op::Dropout { mask }, vec![x]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as a `1 x 1` node.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || lv.rows() == 0 {
            return Err(contract(format!(
                "cross entropy over {} rows with {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(contract(format!("target {t} out of range for {} classes", lv.cols())));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        let loss = Matrix::filled(1, 1, total / targets.len() as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropyMean {
                probs,
                targets: targets.to_vec(),
            },
            vec![logits],
        ))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Matrix::filled(1, 1, xv.sum() / xv.len().max(1) as f64);
        self.push(v, Op::Mean, vec![x])
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(r) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(contract(format!("row {r} out of range for {}", xv.shape())));
        }
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        Ok(self.push(out, Op::SelectRows(rows.to_vec()), vec![x]))
    }

    pub fn slice_block(
        &mut self,
        x: NodeId,
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let v = self.value(x).block(r0, c0, rows, cols)?;
        Ok(self.push(v, Op::SliceBlock { r0, c0 }, vec![x]))
    }

    /// Places each part at its `(row, col)` offset inside a `rows x cols`
    /// zero matrix. Parts must not overlap.
    pub fn assemble(
        &mut self,
        rows: usize,
        cols: usize,
        parts: &[(NodeId, usize, usize)],
    ) -> Result<NodeId> {
        let mut out = Matrix::zeros(rows, cols);
        for &(id, r0, c0) in parts {
            let pv = self.value(id);
            if r0 + pv.rows() > rows || c0 + pv.cols() > cols {
                return Err(contract(format!(
                    "part {} at ({r0},{c0}) exceeds {rows}x{cols}",
                    pv.shape()
                )));
            }
            for r in 0..pv.rows() {
                out.row_mut(r0 + r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
            }
        }
        let offsets = parts.iter().map(|&(_, r, c)| (r, c)).collect();
        let parents = parts.iter().map(|&(id, _, _)| id).collect();
        Ok(self.push(out, Op::Assemble(offsets), parents))
    }

    /// Adds the gradient contributions of node `idx` into `grads`. Gather and
    /// slice ops scatter straight into the parent's buffer.
    pub(crate) fn accumulate_local(
        &self,
        idx: usize,
        dy: &Matrix,
        wants: &[bool],
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        fn slot<'g>(tape: &Tape, grads: &'g mut [Option<Matrix>], id: NodeId) -> &'g mut Matrix {
            let p = &tape.nodes[id.0].value;
            grads[id.0].get_or_insert_with(|| Matrix::zeros(p.rows(), p.cols()))
        }
        match &node.op {
            Op::SelectRows(rows) => {
                let dx = slot(self, grads, node.parents[0]);
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in dx.row_mut(r).iter_mut().zip(dy.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::SliceBlock { r0, c0 } => {
                let dx = slot(self, grads, node.parents[0]);
                for r in 0..dy.rows() {
                    for (o, v) in dx.row_mut(r0 + r)[*c0..*c0 + dy.cols()].iter_mut().zip(dy.row(r)) {
                        *o += v;
                    }
                }
            }
            _ => {
                let contribs = self.local_grads(idx, dy, wants)?;
                for (i, contrib) in contribs.into_iter().enumerate() {
                    if !wants[i] {
                        continue;
                    }
                    let contrib = contrib.expect("gradient computed for requested parent");
                    match &mut grads[node.parents[i].0] {
                        Some(acc) => acc.add_assign(&contrib)?,
                        empty => *empty = Some(contrib),
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-parent gradient contributions of node `idx`; `None` where the
    /// parent does not want one.
    fn local_grads(
        &self,
        idx: usize,
        dy: &Matrix,
        wants: &[bool],
    ) -> Result<Vec<Option<Matrix>>> {
        let node = &self.nodes[idx];
        let pv = |i: usize| &self.nodes[node.parents[i].0].value;
        let want = |i: usize| wants[i];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => vec![
                want(0).then(|| matmul_nt(dy, pv(1))).transpose()?,
                want(1).then(|| matmul_tn(pv(0), dy)).transpose()?,
            ],
            Op::MatMulNt => vec![
                want(0).then(|| matmul(dy, pv(1))).transpose()?,
                want(1).then(|| matmul_tn(dy, pv(0))).transpose()?,
            ],
            Op::Add => vec![want(0).then(|| dy.clone()), want(1).then(|| dy.clone())],
            Op::Mul => vec![
                want(0).then(|| dy.hadamard(pv(1))).transpose()?,
                want(1).then(|| dy.hadamard(pv(0))).transpose()?,
            ],
            Op::AddRowVector => vec![want(0).then(|| dy.clone()), want(1).then(|| column_sums(dy))],
            Op::MulRowVector => {
                let (x, g) = (pv(0), pv(1));
                let dx = want(0).then(|| {
                    let mut d = dy.clone();
                    for r in 0..d.rows() {
                        for (v, gv) in d.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *v *= gv;
                        }
                    }
                    d
                });
                let dg = want(1).then(|| dy.hadamard(x).map(|m| column_sums(&m))).transpose()?;
                vec![dx, dg]
            }
            Op::Relu => vec![Some(dy.zip_map(pv(0), "relu", |d, x| if x > 0.0 { d } else { 0.0 })?)],
            Op::Gelu => vec![Some(dy.zip_map(pv(0), "gelu", |d, x| d * gelu_grad(x))?)],
            Op::SoftmaxRows => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, yv), dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNormRows { inv_std } => {
                let xhat = &node.value;
                let n = xhat.cols() as f64;
                let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let (xr, dr) = (xhat.row(r), dy.row(r));
                    let mean_d = dr.iter().sum::<f64>() / n;
                    let mean_dx: f64 = xr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, xv), dv) in dx.row_mut(r).iter_mut().zip(xr).zip(dr) {
                        *o = inv * (dv - mean_d - xv * mean_dx);
                    }
                }
                vec![Some(dx)]
            }
            Op::Scale(s) => vec![Some(dy.scale(*s))],
            Op::Dropout { mask } => vec![Some(dy.hadamard(mask)?)],
            Op::CrossEntropyMean { probs, targets } => {
                let g = dy[(0, 0)] / targets.len() as f64;
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dx[(r, t)] -= 1.0;
                }
                vec![Some(dx.scale(g))]
            }
            Op::Mean => {
                let x = pv(0);
                vec![Some(Matrix::filled(x.rows(), x.cols(), dy[(0, 0)] / x.len().max(1) as f64))]
            }
            Op::SelectRows(_) | Op::SliceBlock { .. } => unreachable!("scattered in accumulate_local"),
            Op::Assemble(offsets) => offsets
                .iter()
                .enumerate()
                .map(|(i, &(r0, c0))| {
                    want(i)
                        .then(|| dy.block(r0, c0, pv(i).rows(), pv(i).cols()))
                        .transpose()
                })
                .collect::<Result<_>>()?,
        };
        Ok(out)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[-1.0, 2.0]]));
        let r = t.relu(x);
        assert_eq!(t.value(r), &Matrix::from_rows(&[[0.0, 2.0]]));

        let z = t.constant(Matrix::zeros(1, 2));
        let s = t.softmax_rows(z);
        assert_eq!(t.value(s), &Matrix::from_rows(&[[0.5, 0.5]]));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[1000.0, 1000.0, -1000.0]]));
        let s = t.softmax_rows(x);
        let v = t.value(s);
        assert!(v.is_finite());
        assert!((v[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layernorm_moments() {
        let mut rng = Rng::new(17);
        let row = rng.gaussian_matrix(1, 64, 3.0).map(|v| v + 5.0);
        let mut t = Tape::new();
        let x = t.constant(row);
        let y = t.layernorm_rows(x);
        let v = t.value(y).as_slice();
        let mean = v.iter().sum::<f64>() / 64.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() <= 1e-7);
        assert!((var - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), true);
        let m = t.mean(x);
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap(), &Matrix::filled(2, 2, 0.25));
    }

    #[test]
    fn linear_chain_gradient_matches_closed_form() {
        // loss = mean(W x) with W: 3x4, x: 4x2. dloss/dW[i][j] = sum_c x[j][c] / 6.
        let mut rng = Rng::new(2);
        let w = rng.gaussian_matrix(3, 4, 1.0);
        let xv = rng.gaussian_matrix(4, 2, 1.0);
        let mut t = Tape::new();
        let wn = t.leaf(w, true);
        let xn = t.constant(xv.clone());
        let y = t.matmul(wn, xn).unwrap();
        let loss = t.mean(y);
        let g = t.backward(loss).unwrap();
        let expected = Matrix::from_fn(3, 4, |_, j| xv.row(j).iter().sum::<f64>() / 6.0);
        assert!(g.get(wn).unwrap().max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(g.get(xn).is_none());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::identity(2), false);
        let a = t.leaf(Matrix::filled(2, 2, 0.5), true);
        let y = t.matmul(w, a).unwrap();
        let loss = t.mean(y);
        let g = t.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        assert!(g.get(a).is_some());
        let ids: Vec<_> = g.ids().collect();
        assert!(ids.iter().all(|&id| t.requires_grad(id)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = Rng::new(1);
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(100, 100, 1.0));
        assert_eq!(t.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(t.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(t.dropout(x, 1.0, &mut rng, true).is_err());

        let d = t.dropout(x, 0.5, &mut rng, true).unwrap();
        let v = t.value(d).as_slice();
        let kept = v.iter().filter(|&&a| a != 0.0).count() as f64 / v.len() as f64;
        assert!((kept - 0.5).abs() <= 0.02, "kept {kept}");
        assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        let v = t.constant(Matrix::zeros(1, 2));
        assert!(matches!(t.add_bias_rowwise(a, v), Err(Error::Shape { .. })));
        assert!(t.cross_entropy_mean(a, &[0, 3]).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(2, 4), true);
        let l = t.cross_entropy_mean(z, &[1, 3]).unwrap();
        assert!((t.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        let gz = g.get(z).unwrap();
        assert!((gz[(0, 1)] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((gz[(0, 0)] - 0.125).abs() < 1e-15);
    }
}
