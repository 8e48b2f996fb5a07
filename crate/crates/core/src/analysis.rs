//! Measurements on trained adapters: subspace similarity between a frozen
//! weight and its low-rank update, the parameter-efficiency (PE) score,
//! parameter accounting, and per-branch `[CLS]` feature export.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg::{svd, Matrix};
use crate::model::{BranchFeatures, Layer, MicroTransformer, ModelConfig, Site};
use crate::params::Role;

/// Singular values below this fraction of the largest do not count as
/// available directions.
pub const RANK_TOLERANCE: f64 = 1e-10;

pub const DEFAULT_I_MAX_FRAC: f64 = 0.10;
pub const DEFAULT_J_MAX: usize = 2;

/// Pre-trained magnitude `M₀` in the PE score.
pub const DEFAULT_M0: f64 = 1e8;

/// Leading left singular vectors of `m`, as many as it has non-negligible
/// singular values.
fn leading_basis(m: &Matrix) -> Result<(Matrix, usize)> {
    let dec = svd(m)?;
    let rank = dec.numerical_rank(RANK_TOLERANCE);
    Ok((dec.u, rank))
}

fn phi(um: &Matrix, un: &Matrix, i: usize, j: usize) -> f64 {
    let mut total = 0.0;
    for a in 0..i {
        for b in 0..j {
            let dot: f64 = (0..um.rows()).map(|r| um[(r, a)] * un[(r, b)]).sum();
            total += dot * dot;
        }
    }
    total / i.min(j) as f64
}

/// `φ(M, N, i, j) = ‖U_Mⁱᵀ U_Nʲ‖²_F / min(i, j)`, where `U_Mⁱ` holds the top
/// `i` left singular vectors of `M`.
pub fn subspace_similarity(m: &Matrix, n: &Matrix, i: usize, j: usize) -> Result<f64> {
    if m.rows() != n.rows() {
        return Err(Error::Shape {
            op: "subspace_similarity",
            lhs: m.shape(),
            rhs: n.shape(),
        });
    }
    let (um, rm) = leading_basis(m)?;
    let (un, rn) = leading_basis(n)?;
    if i == 0 || j == 0 || i > rm || j > rn {
        return Err(contract(format!(
            "subspace_similarity: need 1 <= i <= {rm} and 1 <= j <= {rn}, got i = {i}, j = {j}"
        )));
    }
    Ok(phi(&um, &un, i, j))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Parallel,
    Sequential,
}

impl Branch {
    /// Label of the compared pair.
    pub fn label(self) -> &'static str {
        match self {
            Branch::Parallel => "W0 vs A",
            Branch::Sequential => "W0 vs BW0",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimilarityGrid {
    pub layer: String,
    pub branch: Branch,
    /// `values[i-1][j-1] = φ(W₀, Δ, i, j)`.
    pub values: Vec<Vec<f64>>,
    pub i_max: usize,
    pub j_max: usize,
}

impl SimilarityGrid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i - 1][j - 1]
    }

    pub fn label(&self) -> &'static str {
        self.branch.label()
    }

    /// CSV with header `i,j,phi`, one row per cell, `i` major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,phi\n");
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", i + 1, j + 1, v).expect("writing to a String");
            }
        }
        out
    }
}

/// `φ(W₀, A, i, j)` or `φ(W₀, BW₀, i, j)` for the layer at `site` of `block`,
/// over `i ≤ ⌈i_max_frac · min(d, k)⌉` and `j ≤ j_max`.
pub fn similarity_grid(
    model: &MicroTransformer,
    block: usize,
    site: Site,
    branch: Branch,
    i_max_frac: f64,
    j_max: usize,
) -> Result<SimilarityGrid> {
    let layer = model
        .blocks
        .get(block)
        .ok_or_else(|| contract(format!("block {block} out of range")))?
        .site(site);
    let hydra = match layer {
        Layer::Hydra(h) => h,
        Layer::Dense(_) => {
            return Err(contract(format!("{} has no adapters", site.layer_name(block))));
        }
    };
    if !(i_max_frac > 0.0 && i_max_frac <= 1.0) || j_max == 0 {
        return Err(contract("similarity grid needs 0 < i_max_frac <= 1 and j_max >= 1"));
    }
    let name = site.layer_name(block);
    let (a, bw0) = hydra.effective_updates();
    let update = match branch {
        Branch::Parallel => a,
        Branch::Sequential => bw0,
    };
    let (uw, rw) = leading_basis(&hydra.w0)?;
    if update.max_abs() == 0.0 {
        return Err(Error::DegenerateAdapter(format!(
            "{name}: {} update is zero",
            branch.label()
        )));
    }
    let (uu, ru) = leading_basis(&update)?;
    let (d, k) = (hydra.out_features(), hydra.in_features());
    let i_max = (i_max_frac * d.min(k) as f64).ceil() as usize;
    if i_max > rw {
        return Err(contract(format!("{name}: W0 has rank {rw} < {i_max}")));
    }
    if j_max > ru {
        return Err(Error::DegenerateAdapter(format!(
            "{name}: {} update has rank {ru} < {j_max}",
            branch.label()
        )));
    }
    let values = (1..=i_max)
        .map(|i| (1..=j_max).map(|j| phi(&uw, &uu, i, j)).collect())
        .collect();
    Ok(SimilarityGrid {
        layer: name,
        branch,
        values,
        i_max,
        j_max,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeInput {
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub trainable_params: f64,
    pub m0: f64,
}

impl PeInput {
    pub fn new(accuracy: f64, trainable_params: f64) -> Result<Self> {
        let inp = Self {
            accuracy,
            trainable_params,
            m0: DEFAULT_M0,
        };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(contract(format!("accuracy {} outside [0, 1]", self.accuracy)));
        }
        if !(self.trainable_params >= 0.0 && self.trainable_params.is_finite()) {
            return Err(contract("trainable parameter count must be finite and >= 0"));
        }
        if !(self.m0 > 0.0 && self.m0.is_finite()) {
            return Err(contract("M0 must be positive"));
        }
        Ok(())
    }
}

/// `accuracy · exp(−log₁₀(p / M₀ + 1))`.
pub fn pe_score(inp: &PeInput) -> f64 {
    inp.accuracy * (-(inp.trainable_params / inp.m0 + 1.0).log10()).exp()
}

/// Writes one CSV row per `(example, branch)`: header
/// `example_id,branch,f_0..f_{d-1}`, preceded by `#` comment lines carrying
/// the layer name, `b₀` and `s·Bb₀`. Since the pretrained row already
/// contains `b₀` and the sequential row `s·Bb₀`, the three rows of an example
/// sum to the layer output.
pub fn write_branch_features(features: &BranchFeatures, mut w: impl Write) -> Result<()> {
    let d = features.pretrained.cols();
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    writeln!(w, "# layer,{}", features.layer)?;
    writeln!(w, "# bias,{}", join(features.bias.row(0)))?;
    writeln!(w, "# sequential_bias,{}", join(features.sequential_bias.row(0)))?;
    let cols: Vec<String> = (0..d).map(|c| format!("f_{c}")).collect();
    writeln!(w, "example_id,branch,{}", cols.join(","))?;
    for n in 0..features.pretrained.rows() {
        for (tag, m) in [
            ("pretrained", &features.pretrained),
            ("parallel", &features.parallel),
            ("sequential", &features.sequential),
        ] {
            writeln!(w, "{n},{tag},{}", join(m.row(n)))?;
        }
    }
    Ok(())
}

/// Runs `tokens` through `model` and writes the branch features of its last
/// adapted layer to `path`.
pub fn export_branch_features(model: &MicroTransformer, tokens: &[Vec<usize>], path: &Path) -> Result<()> {
    if tokens.is_empty() {
        return Err(contract("feature export needs at least one example"));
    }
    let features = model.branch_features(tokens)?;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_branch_features(&features, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub adapter_params: usize,
    pub head_params: usize,
    pub frozen_params: usize,
    pub total: usize,
    pub trainable_millions: f64,
}

impl ParamReport {
    fn from_counts(adapter: usize, head: usize, frozen: usize) -> Self {
        Self {
            adapter_params: adapter,
            head_params: head,
            frozen_params: frozen,
            total: adapter + head + frozen,
            trainable_millions: (adapter + head) as f64 / 1e6,
        }
    }

    pub fn trainable(&self) -> usize {
        self.adapter_params + self.head_params
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable() as f64 / self.total as f64
    }
}

/// Counts of a built model, by role.
pub fn param_report(model: &MicroTransformer) -> ParamReport {
    ParamReport::from_counts(
        model.param_count(Role::Adapter),
        model.param_count(Role::Head),
        model.param_count(Role::Frozen),
    )
}

/// Counts implied by a config, without allocating any weights.
pub fn param_report_for(config: &ModelConfig) -> ParamReport {
    let mut counts = [0usize; 3];
    for p in config.param_layout() {
        let slot = match p.role {
            Role::Adapter => 0,
            Role::Head => 1,
            Role::Frozen => 2,
        };
        counts[slot] += p.len();
    }
    ParamReport::from_counts(counts[0], counts[1], counts[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterSpec;
    use crate::linalg::Rng;
    use crate::model::Placement;
    use crate::oracle;

    fn adapted_model(seed: u64) -> MicroTransformer {
        let cfg = ModelConfig {
            blocks: 1,
            ..ModelConfig::default()
        };
        let mut model = MicroTransformer::build(&cfg, &mut Rng::new(seed)).unwrap();
        model.set_mode(crate::Mode::Finetune);
        model
    }

    #[test]
    fn pe_table_rows() {
        for (acc, p, want) in [
            (0.6549, 87.9e6, 0.498),
            (0.6632, 0.03e6, 0.663),
            (0.6148, 0.18e6, 0.614),
            (0.7095, 0.20e6, 0.709),
        ] {
            let got = pe_score(&PeInput::new(acc, p).unwrap());
            assert!((got - want).abs() <= 1e-3, "{acc} {p}: {got}");
        }
    }

    #[test]
    fn pe_zero_params_is_accuracy() {
        assert_eq!(pe_score(&PeInput::new(0.8125, 0.0).unwrap()), 0.8125);
    }

    #[test]
    fn pe_rejects_bad_input() {
        assert!(PeInput::new(1.5, 10.0).is_err());
        assert!(PeInput::new(0.5, -1.0).is_err());
    }

    #[test]
    fn phi_self_and_orthogonal() {
        let m = Matrix::diag(&[3.0, 2.0, 1.0]);
        assert!((subspace_similarity(&m, &m, 2, 2).unwrap() - 1.0).abs() < 1e-12);
        let e1 = Matrix::from_rows(&[[1.0], [0.0], [0.0]]);
        let e2 = Matrix::from_rows(&[[0.0], [2.0], [0.0]]);
        assert!(subspace_similarity(&e1, &e2, 1, 1).unwrap().abs() < 1e-15);
    }

    #[test]
    fn phi_rejects_excess_directions() {
        let e1 = Matrix::from_rows(&[[1.0], [0.0], [0.0]]);
        assert!(matches!(subspace_similarity(&e1, &e1, 2, 1), Err(Error::Contract(_))));
        assert!(subspace_similarity(&e1, &e1, 0, 1).is_err());
        assert!(subspace_similarity(&e1, &Matrix::identity(2), 1, 1).is_err());
    }

    #[test]
    fn phi_matches_gram_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let m = rng.gaussian_matrix(12, 9, 1.0);
            let n = rng.gaussian_matrix(12, 5, 1.0);
            for (i, j) in [(1, 1), (3, 2), (4, 4)] {
                let got = subspace_similarity(&m, &n, i, j).unwrap();
                let want = oracle::subspace_similarity(&m, &n, i, j);
                assert!((got - want).abs() < 1e-8, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_adapter_grid_is_degenerate() {
        let model = adapted_model(3);
        let err = similarity_grid(&model, 0, Site::MlpOut, Branch::Parallel, 0.1, 2).unwrap_err();
        assert!(matches!(err, Error::DegenerateAdapter(_)), "{err}");
    }

    #[test]
    fn unadapted_layer_rejected() {
        let model = adapted_model(3);
        let err = similarity_grid(&model, 0, Site::MsaQkv, Branch::Parallel, 0.1, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn dyad_adapter_is_fully_aligned() {
        let mut model = adapted_model(5);
        let h = model.hydra_mut(0, Site::MlpOut).unwrap();
        let dec = svd(&h.w0).unwrap();
        // A = u1 s1 v1ᵀ + u2 s2 v2ᵀ, split as A_up = [u1 s1, u2 s2], A_down = [v1; v2].
        let up = Matrix::from_fn(h.out_features(), 2, |r, c| dec.u[(r, c)] * dec.s[c]);
        let down = dec.vt.block(0, 0, 2, h.in_features()).unwrap();
        let a = h.parallel.as_mut().unwrap();
        a.up = up;
        a.down = down;
        let grid = similarity_grid(&model, 0, Site::MlpOut, Branch::Parallel, 0.1, 2).unwrap();
        assert_eq!(grid.i_max, 7);
        for i in 2..=grid.i_max {
            assert!((grid.get(i, 2) - 1.0).abs() < 1e-10, "i = {i}: {}", grid.get(i, 2));
        }
        assert!(grid.to_csv().starts_with("i,j,phi\n1,1,"));
        assert_eq!(grid.to_csv().lines().count(), 1 + 7 * 2);
    }

    #[test]
    fn param_report_partitions() {
        let cfg = ModelConfig::default();
        let model = MicroTransformer::build(&cfg, &mut Rng::new(0)).unwrap();
        let rep = param_report(&model);
        assert_eq!(rep, param_report_for(&cfg));
        assert_eq!(rep.total, model.total_param_count());
        assert_eq!(rep.total, rep.adapter_params + rep.head_params + rep.frozen_params);

        let plain = param_report_for(&cfg.without_adapters());
        assert_eq!(plain.adapter_params, 0);
        assert_eq!(plain.head_params, 64 * 4 + 4);
    }

    #[test]
    fn vit_base_mlp_out_count() {
        let cfg = ModelConfig {
            vocab: 8,
            embed_dim: 768,
            mlp_hidden: 3072,
            heads: 12,
            blocks: 12,
            seq_len: 2,
            num_classes: 2,
            placement: Placement::of(&[Site::MlpOut]),
            adapter: AdapterSpec::hydra(4),
        };
        assert_eq!(param_report_for(&cfg).adapter_params, 129_024);
    }

    #[test]
    fn feature_rows_decompose_output() {
        let mut model = adapted_model(9);
        let mut rng = Rng::new(1);
        let h = model.hydra_mut(0, Site::MlpOut).unwrap();
        let a_up = rng.gaussian_matrix(64, 2, 0.1);
        let b_up = rng.gaussian_matrix(64, 2, 0.1);
        h.set_up_projections(Some(a_up), Some(b_up)).unwrap();
        let tokens: Vec<Vec<usize>> = (0..3)
            .map(|i| (0..17).map(|p| if p == 0 { 0 } else { (i * 5 + p) % 32 }).collect())
            .collect();
        let f = model.branch_features(&tokens).unwrap();
        let sum = f.pretrained.add(&f.parallel).unwrap().add(&f.sequential).unwrap();
        assert!(sum.max_abs_diff(&f.output).unwrap() < 1e-10);

        let mut buf = Vec::new();
        write_branch_features(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert!(rows[0].starts_with("example_id,branch,f_0,"));
        assert_eq!(rows.len() - 1, 3 * 3);
    }
}
