//! Slow, independent reference implementations used only to check the fast
//! paths. The numerical oracles (products, eigen-decomposition, the dense
//! Hydra forward) share nothing with the code under test beyond the `Matrix`
//! container; the gradient checkers compare the tape against central
//! differences of its own forward values.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::linalg::{Matrix, Rng};
use crate::model::MicroTransformer;

/// Textbook triple-loop product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "naive_matmul inner dimension");
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for p in 0..a.cols() {
                acc += a[(i, p)] * b[(p, j)];
            }
            out.row_mut(i)[j] = acc;
        }
    }
    out
}

/// Eigen-decomposition of a symmetric matrix by cyclic two-sided Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as columns.
pub fn symmetric_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.rows();
    assert_eq!(n, m.cols(), "symmetric_eigen needs a square matrix");
    let mut a: Vec<Vec<f64>> = (0..n).map(|r| m.row(r).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|r| (0..n).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        let scale: f64 = (0..n).map(|p| a[p][p] * a[p][p]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    (*x, *y) = (c * *x - s * *y, s * *x + c * *y);
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[r][order[c]]);
    (values, vectors)
}

/// Left singular vectors and singular values via the eigen-decomposition of
/// `M Mᵀ`.
pub fn gram_left_singular(m: &Matrix) -> (Vec<f64>, Matrix) {
    let gram = naive_matmul(m, &m.transpose());
    let (values, vectors) = symmetric_eigen(&gram);
    (values.into_iter().map(|l| l.max(0.0).sqrt()).collect(), vectors)
}

/// `‖U_Mⁱᵀ U_Nʲ‖²_F / min(i, j)` with both bases taken from the Gram route.
pub fn subspace_similarity(m: &Matrix, n: &Matrix, i: usize, j: usize) -> f64 {
    let (_, um) = gram_left_singular(m);
    let (_, un) = gram_left_singular(n);
    let mut total = 0.0;
    for a in 0..i {
        for b in 0..j {
            let dot: f64 = (0..um.rows()).map(|r| um[(r, a)] * un[(r, b)]).sum();
            total += dot * dot;
        }
    }
    total / i.min(j) as f64
}

/// Central difference `(f(x + h e) - f(x - h e)) / 2h` at flat index `idx`.
pub fn central_difference(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, idx: usize, h: f64) -> f64 {
    let mut plus = x.clone();
    plus.as_mut_slice()[idx] += h;
    let mut minus = x.clone();
    minus.as_mut_slice()[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Settings shared by the gradient checks.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub probes: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            probes: 50,
            floor: 1e-6,
            seed: 0,
        }
    }
}

fn weighted_sum(tape: &mut Tape, out: NodeId, weights: &Matrix) -> Result<NodeId> {
    let r = tape.constant(weights.clone());
    let prod = tape.mul(out, r)?;
    let m = tape.mean(prod);
    Ok(tape.scale(m, weights.len() as f64))
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `sum(build(inputs) ⊙ R)` for a random `R`, over
/// `probes` random input coordinates.
pub fn check_op(
    inputs: &[Matrix],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    cfg: GradCheck,
) -> Result<f64> {
    let mut rng = Rng::new(cfg.seed);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let out = build(&mut tape, &ids)?;
    let (r, c) = (tape.value(out).rows(), tape.value(out).cols());
    let weights = rng.gaussian_matrix(r, c, 1.0);
    let loss = weighted_sum(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = probe.iter().map(|m| tape.leaf(m.clone(), false)).collect();
        let out = build(&mut tape, &ids).expect("op succeeded on the unperturbed input");
        let loss = weighted_sum(&mut tape, out, &weights).expect("same shape");
        tape.scalar(loss).expect("scalar loss")
    };
    let mut worst = 0.0f64;
    for _ in 0..cfg.probes {
        let which = rng.below(inputs.len());
        let idx = rng.below(inputs[which].len());
        let analytic = grads.get(ids[which]).map_or(0.0, |g| g.as_slice()[idx]);
        let numeric = central_difference(
            |x| {
                let mut probe = inputs.to_vec();
                probe[which] = x.clone();
                eval(&probe)
            },
            &inputs[which],
            idx,
            cfg.step,
        );
        worst = worst.max(relative_error(analytic, numeric, cfg.floor));
    }
    Ok(worst)
}

/// Worst relative error of the gradient of the model's mean cross-entropy
/// with respect to the parameter `name`, over random coordinates.
pub fn check_model_param(
    model: &MicroTransformer,
    tokens: &[Vec<usize>],
    labels: &[usize],
    name: &str,
    cfg: GradCheck,
) -> Result<f64> {
    let loss_of = |m: &MicroTransformer| -> Result<f64> {
        let mut cx = m.context(false, Rng::new(0));
        let out = m.forward(&mut cx, tokens, false)?;
        let loss = cx.tape.cross_entropy_mean(out.logits, labels)?;
        cx.tape.scalar(loss)
    };
    let mut cx = model.context(false, Rng::new(0));
    let out = model.forward(&mut cx, tokens, false)?;
    let loss = cx.tape.cross_entropy_mean(out.logits, labels)?;
    let mut grads = cx.tape.backward(loss)?;
    let named = cx.param_grads(&mut grads);
    let grad = named
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, g)| g)
        .ok_or_else(|| crate::Error::Contract(format!("{name} received no gradient")))?;
    let value = model
        .named_params()
        .into_iter()
        .find(|(n, _, _)| n == name)
        .map(|(_, m, _)| m.clone())
        .expect("parameter with a gradient exists");

    let mut rng = Rng::new(cfg.seed);
    let mut worst = 0.0f64;
    for _ in 0..cfg.probes {
        let idx = rng.below(value.len());
        let numeric = central_difference(
            |x| {
                let mut m = model.clone();
                m.set_param(name, x).expect("same shape");
                loss_of(&m).expect("forward succeeded before")
            },
            &value,
            idx,
            cfg.step,
        );
        worst = worst.max(relative_error(grad.as_slice()[idx], numeric, cfg.floor));
    }
    Ok(worst)
}

/// Dense factors of one adapted layer, for [`hydra_dense_forward`].
pub struct DenseHydra<'a> {
    pub w0: &'a Matrix,
    pub b0: &'a Matrix,
    pub a: Option<(&'a Matrix, &'a Matrix)>,
    pub b: Option<(&'a Matrix, &'a Matrix)>,
    pub scaling: f64,
}

/// Per-row scalar evaluation of `f(x) + s·A_up(A_down x) + s·B_up(B_down f(x))`.
pub fn hydra_dense_forward(layer: &DenseHydra<'_>, x: &Matrix) -> Matrix {
    let (d, k) = (layer.w0.rows(), layer.w0.cols());
    let matvec = |m: &Matrix, v: &[f64]| -> Vec<f64> {
        (0..m.rows())
            .map(|r| (0..m.cols()).map(|c| m[(r, c)] * v[c]).sum())
            .collect()
    };
    let mut out = Matrix::zeros(x.rows(), d);
    for n in 0..x.rows() {
        let xv = x.row(n);
        assert_eq!(xv.len(), k);
        let f: Vec<f64> = matvec(layer.w0, xv)
            .iter()
            .zip(layer.b0.row(0))
            .map(|(v, b)| v + b)
            .collect();
        let mut h = f.clone();
        if let Some((up, down)) = layer.a {
            let g = matvec(up, &matvec(down, xv));
            h.iter_mut().zip(g).for_each(|(h, g)| *h += layer.scaling * g);
        }
        if let Some((up, down)) = layer.b {
            let g = matvec(up, &matvec(down, &f));
            h.iter_mut().zip(g).for_each(|(h, g)| *h += layer.scaling * g);
        }
        out.row_mut(n).copy_from_slice(&h);
    }
    out
}
