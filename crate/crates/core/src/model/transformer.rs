use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Site};
use crate::adapters::{AdapterSpec, BranchNodes, HydraLinear, Linear};
use crate::autodiff::NodeId;
use crate::error::{contract, Result};
use crate::linalg::{gaussian, matmul_nt, Matrix, Rng};
use crate::params::{ForwardCtx, Role};

/// Std of every base weight at initialisation.
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// All base parameters train; adapter branches are bypassed.
    Pretrain,
    /// Base frozen; adapter factors and head train.
    Finetune,
    /// Nothing trains, dropout off.
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }

    fn forward(&self, cx: &mut ForwardCtx, name: &str, x: NodeId) -> Result<NodeId> {
        let g = cx.param(format!("{name}.gain"), &self.gain, Role::Frozen);
        let b = cx.param(format!("{name}.bias"), &self.bias, Role::Frozen);
        let n = cx.tape.layernorm_rows(x);
        let n = cx.tape.mul_rowwise(n, g)?;
        cx.tape.add_bias_rowwise(n, b)
    }
}

/// A block linear layer, adapted or not.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Linear),
    Hydra(HydraLinear),
}

impl Layer {
    pub fn base(&self) -> Linear {
        match self {
            Layer::Dense(l) => l.clone(),
            Layer::Hydra(h) => h.base(),
        }
    }

    pub fn as_hydra(&self) -> Option<&HydraLinear> {
        match self {
            Layer::Hydra(h) => Some(h),
            Layer::Dense(_) => None,
        }
    }

    fn forward(&self, cx: &mut ForwardCtx, name: &str, x: NodeId) -> Result<(NodeId, Option<BranchNodes>)> {
        match self {
            Layer::Dense(l) => Ok((l.forward(cx, name, Role::Frozen, x)?, None)),
            Layer::Hydra(h) => {
                let nodes = h.forward_train(cx, name, x)?;
                Ok((nodes.output, Some(nodes)))
            }
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Matrix, Role)) {
        match self {
            Layer::Dense(l) => {
                f(format!("{name}.weight"), &l.w, Role::Frozen);
                f(format!("{name}.bias"), &l.b, Role::Frozen);
            }
            Layer::Hydra(h) => {
                f(format!("{name}.weight"), &h.w0, Role::Frozen);
                f(format!("{name}.bias"), &h.b0, Role::Frozen);
                if let Some(a) = &h.parallel {
                    f(format!("{name}.a_up"), &a.up, Role::Adapter);
                    f(format!("{name}.a_down"), &a.down, Role::Adapter);
                }
                if let Some(b) = &h.sequential {
                    f(format!("{name}.b_up"), &b.up, Role::Adapter);
                    f(format!("{name}.b_down"), &b.down, Role::Adapter);
                }
            }
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Matrix, Role)) {
        match self {
            Layer::Dense(l) => {
                f(format!("{name}.weight"), &mut l.w, Role::Frozen);
                f(format!("{name}.bias"), &mut l.b, Role::Frozen);
            }
            Layer::Hydra(h) => {
                f(format!("{name}.weight"), &mut h.w0, Role::Frozen);
                f(format!("{name}.bias"), &mut h.b0, Role::Frozen);
                if let Some(a) = &mut h.parallel {
                    f(format!("{name}.a_up"), &mut a.up, Role::Adapter);
                    f(format!("{name}.a_down"), &mut a.down, Role::Adapter);
                }
                if let Some(b) = &mut h.sequential {
                    f(format!("{name}.b_up"), &mut b.up, Role::Adapter);
                    f(format!("{name}.b_down"), &mut b.down, Role::Adapter);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Layer,
    pub proj: Layer,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub out: Layer,
}

impl TransformerBlock {
    pub fn site(&self, site: Site) -> &Layer {
        match site {
            Site::MsaQkv => &self.qkv,
            Site::MsaProj => &self.proj,
            Site::MlpOut => &self.out,
        }
    }

    fn site_mut(&mut self, site: Site) -> &mut Layer {
        match site {
            Site::MsaQkv => &mut self.qkv,
            Site::MsaProj => &mut self.proj,
            Site::MlpOut => &mut self.out,
        }
    }
}

/// `[CLS]`-position outputs of the three branches of one adapted layer,
/// one row per example.
#[derive(Clone, Debug)]
pub struct BranchFeatures {
    pub layer: String,
    /// `f(x) = W₀x + b₀` (includes `b₀`).
    pub pretrained: Matrix,
    /// `s·A x`; zeros when the branch is absent.
    pub parallel: Matrix,
    /// `s·B f(x)` (includes `s·Bb₀`); zeros when the branch is absent.
    pub sequential: Matrix,
    /// Total layer output; equals the sum of the three rows above.
    pub output: Matrix,
    /// `b₀` of the layer.
    pub bias: Matrix,
    /// `s·Bb₀` of the layer.
    pub sequential_bias: Matrix,
}

#[derive(Debug)]
pub struct ModelOutput {
    pub logits: NodeId,
    /// Attention probability nodes, one per (block, example, head).
    pub attention: Vec<NodeId>,
    pub features: Option<BranchFeatures>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroTransformer {
    pub config: ModelConfig,
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    mode: Mode,
}

fn init_linear(rng: &mut Rng, out: usize, inp: usize) -> Linear {
    Linear {
        w: gaussian(rng, out, inp, INIT_STD),
        b: Matrix::zeros(1, out),
    }
}

impl MicroTransformer {
    /// Draws every base weight from `N(0, 0.02²)` (norm gains 1, biases 0),
    /// then installs the adapters the config places. Base weights do not
    /// depend on the placement.
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let token_embed = gaussian(rng, config.vocab, d, INIT_STD);
        let pos_embed = gaussian(rng, config.seq_len, d, INIT_STD);
        let blocks = (0..config.blocks)
            .map(|_| TransformerBlock {
                ln1: LayerNorm::new(d),
                qkv: Layer::Dense(init_linear(rng, 3 * d, d)),
                proj: Layer::Dense(init_linear(rng, d, d)),
                ln2: LayerNorm::new(d),
                fc: init_linear(rng, config.mlp_hidden, d),
                out: Layer::Dense(init_linear(rng, d, config.mlp_hidden)),
            })
            .collect();
        let head = init_linear(rng, config.num_classes, d);
        let mut model = Self {
            config: config.without_adapters(),
            token_embed,
            pos_embed,
            blocks,
            ln_f: LayerNorm::new(d),
            head,
            mode: Mode::Pretrain,
        };
        if !config.placement.is_empty() {
            model.install_adapters(&config.placement, &config.adapter, rng)?;
        } else {
            model.config.adapter = config.adapter.clone();
        }
        Ok(model)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Replaces the layers at `placement` by freshly initialised adapted
    /// layers built on their current base weights. Sites outside the placement
    /// revert to plain layers.
    pub fn install_adapters(
        &mut self,
        placement: &super::Placement,
        spec: &AdapterSpec,
        rng: &mut Rng,
    ) -> Result<()> {
        let probe = ModelConfig {
            placement: placement.clone(),
            adapter: spec.clone(),
            ..self.config.clone()
        };
        probe.validate()?;
        for block in &mut self.blocks {
            for site in [Site::MsaQkv, Site::MsaProj, Site::MlpOut] {
                let slot = block.site_mut(site);
                let base = slot.base();
                *slot = if placement.contains(site) {
                    Layer::Hydra(HydraLinear::init(base.w, base.b, spec.clone(), rng)?)
                } else {
                    Layer::Dense(base)
                };
            }
        }
        self.config.placement = placement.clone();
        self.config.adapter = spec.clone();
        Ok(())
    }

    /// New classification head with `num_classes` outputs, `N(0, 0.02²)`.
    pub fn reset_head(&mut self, num_classes: usize, rng: &mut Rng) -> Result<()> {
        if num_classes == 0 {
            return Err(contract("num_classes must be >= 1"));
        }
        self.head = init_linear(rng, num_classes, self.config.embed_dim);
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Roles that receive gradients in the current mode.
    pub fn trainable_roles(&self) -> &'static [Role] {
        match self.mode {
            Mode::Pretrain => &[Role::Frozen, Role::Head],
            Mode::Finetune => &[Role::Adapter, Role::Head],
            Mode::Inference => &[],
        }
    }

    /// Forward context for the current mode. `training` is ignored in
    /// inference mode.
    pub fn context(&self, training: bool, dropout_rng: Rng) -> ForwardCtx {
        let training = training && self.mode != Mode::Inference;
        let mut cx = ForwardCtx::new(self.trainable_roles(), training, dropout_rng);
        cx.use_adapters = self.mode != Mode::Pretrain;
        cx
    }

    pub fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<()> {
        if tokens.is_empty() {
            return Err(contract("empty batch"));
        }
        for (i, seq) in tokens.iter().enumerate() {
            if seq.len() != self.config.seq_len {
                return Err(contract(format!(
                    "sequence {i} has length {}, expected {}",
                    seq.len(),
                    self.config.seq_len
                )));
            }
            if let Some(t) = seq.iter().find(|&&t| t >= self.config.vocab) {
                return Err(contract(format!(
                    "token {t} in sequence {i} out of range for vocab {}",
                    self.config.vocab
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `cx`. Logits are `batch x classes`, read
    /// from the final-block `[CLS]` embedding. With `capture`, the branch
    /// outputs of the last adapted layer at the `[CLS]` position are returned.
    pub fn forward(&self, cx: &mut ForwardCtx, tokens: &[Vec<usize>], capture: bool) -> Result<ModelOutput> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (batch, seq, d) = (tokens.len(), cfg.seq_len, cfg.embed_dim);
        let n = batch * seq;
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let attn_scale = 1.0 / (dh as f64).sqrt();

        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = cx.param("embed.token", &self.token_embed, Role::Frozen);
        let pos = cx.param("embed.position", &self.pos_embed, Role::Frozen);
        let te = cx.tape.select_rows(tok, &ids)?;
        let pe = cx.tape.select_rows(pos, &positions)?;
        let mut x = cx.tape.add(te, pe)?;

        let mut attention = Vec::with_capacity(cfg.blocks * batch * heads);
        let mut captured: Option<(String, &HydraLinear, BranchNodes)> = None;
        for (bi, block) in self.blocks.iter().enumerate() {
            let h = block.ln1.forward(cx, &format!("blocks.{bi}.ln1"), x)?;
            let qkv_name = Site::MsaQkv.layer_name(bi);
            let (qkv, qkv_nodes) = block.qkv.forward(cx, &qkv_name, h)?;
            track(&mut captured, qkv_name, &block.qkv, qkv_nodes);

            let mut parts = Vec::with_capacity(batch * heads);
            for b in 0..batch {
                let r0 = b * seq;
                for hd in 0..heads {
                    let c0 = hd * dh;
                    let q = cx.tape.slice_block(qkv, r0, c0, seq, dh)?;
                    let k = cx.tape.slice_block(qkv, r0, d + c0, seq, dh)?;
                    let v = cx.tape.slice_block(qkv, r0, 2 * d + c0, seq, dh)?;
                    let scores = cx.tape.matmul_nt(q, k)?;
                    let scores = cx.tape.scale(scores, attn_scale);
                    let probs = cx.tape.softmax_rows(scores);
                    attention.push(probs);
                    let o = cx.tape.matmul(probs, v)?;
                    parts.push((o, r0, c0));
                }
            }
            let attn = cx.tape.assemble(n, d, &parts)?;
            let proj_name = Site::MsaProj.layer_name(bi);
            let (proj, proj_nodes) = block.proj.forward(cx, &proj_name, attn)?;
            track(&mut captured, proj_name, &block.proj, proj_nodes);
            x = cx.tape.add(x, proj)?;

            let h = block.ln2.forward(cx, &format!("blocks.{bi}.ln2"), x)?;
            let hidden = block.fc.forward(cx, &format!("blocks.{bi}.mlp.fc"), Role::Frozen, h)?;
            let hidden = cx.tape.gelu(hidden);
            let p = cx.hidden_dropout;
            let hidden = cx.dropout(hidden, p)?;
            let out_name = Site::MlpOut.layer_name(bi);
            let (out, out_nodes) = block.out.forward(cx, &out_name, hidden)?;
            track(&mut captured, out_name, &block.out, out_nodes);
            x = cx.tape.add(x, out)?;
        }

        let x = self.ln_f.forward(cx, "ln_f", x)?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let cls = cx.tape.select_rows(x, &cls_rows)?;
        let logits = self.head.forward(cx, "head", Role::Head, cls)?;

        let features = if capture {
            let (name, layer, nodes) = captured
                .ok_or_else(|| contract("branch features requested from a model without adapted layers"))?;
            Some(branch_features(cx, &cls_rows, name, layer, nodes)?)
        } else {
            None
        };
        Ok(ModelOutput {
            logits,
            attention,
            features,
        })
    }

    /// Eval-mode logits as plain values.
    pub fn logits(&self, tokens: &[Vec<usize>]) -> Result<Matrix> {
        let mut cx = self.context(false, Rng::new(0));
        let out = self.forward(&mut cx, tokens, false)?;
        Ok(cx.tape.value(out.logits).clone())
    }

    /// Eval-mode branch features of the last adapted layer.
    pub fn branch_features(&self, tokens: &[Vec<usize>]) -> Result<BranchFeatures> {
        let mut cx = self.context(false, Rng::new(0));
        let out = self.forward(&mut cx, tokens, true)?;
        Ok(out.features.expect("capture requested"))
    }

    /// Copy with every adapted layer replaced by its folded affine map.
    pub fn fold_all(&self) -> Self {
        let mut folded = self.clone();
        for block in &mut folded.blocks {
            for site in [Site::MsaQkv, Site::MsaProj, Site::MlpOut] {
                let slot = block.site_mut(site);
                if let Layer::Hydra(h) = slot {
                    *slot = Layer::Dense(h.fold());
                }
            }
        }
        folded.config.placement = super::Placement::none();
        folded
    }

    /// `(name, layer)` for every adapted layer, in forward order.
    pub fn adapted_layers(&self) -> Vec<(String, &HydraLinear)> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for site in [Site::MsaQkv, Site::MsaProj, Site::MlpOut] {
                if let Some(h) = block.site(site).as_hydra() {
                    out.push((site.layer_name(bi), h));
                }
            }
        }
        out
    }

    /// Mutable access to the adapted layer at `site` of `block`.
    pub fn hydra_mut(&mut self, block: usize, site: Site) -> Option<&mut HydraLinear> {
        match self.blocks.get_mut(block)?.site_mut(site) {
            Layer::Hydra(h) => Some(h),
            Layer::Dense(_) => None,
        }
    }

    /// Visits every parameter tensor in canonical order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix, Role)) {
        f("embed.token".into(), &self.token_embed, Role::Frozen);
        f("embed.position".into(), &self.pos_embed, Role::Frozen);
        for (bi, b) in self.blocks.iter().enumerate() {
            f(format!("blocks.{bi}.ln1.gain"), &b.ln1.gain, Role::Frozen);
            f(format!("blocks.{bi}.ln1.bias"), &b.ln1.bias, Role::Frozen);
            b.qkv.visit(&Site::MsaQkv.layer_name(bi), f);
            b.proj.visit(&Site::MsaProj.layer_name(bi), f);
            f(format!("blocks.{bi}.ln2.gain"), &b.ln2.gain, Role::Frozen);
            f(format!("blocks.{bi}.ln2.bias"), &b.ln2.bias, Role::Frozen);
            f(format!("blocks.{bi}.mlp.fc.weight"), &b.fc.w, Role::Frozen);
            f(format!("blocks.{bi}.mlp.fc.bias"), &b.fc.b, Role::Frozen);
            b.out.visit(&Site::MlpOut.layer_name(bi), f);
        }
        f("ln_f.gain".into(), &self.ln_f.gain, Role::Frozen);
        f("ln_f.bias".into(), &self.ln_f.bias, Role::Frozen);
        f("head.weight".into(), &self.head.w, Role::Head);
        f("head.bias".into(), &self.head.b, Role::Head);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix, Role)) {
        f("embed.token".into(), &mut self.token_embed, Role::Frozen);
        f("embed.position".into(), &mut self.pos_embed, Role::Frozen);
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            f(format!("blocks.{bi}.ln1.gain"), &mut b.ln1.gain, Role::Frozen);
            f(format!("blocks.{bi}.ln1.bias"), &mut b.ln1.bias, Role::Frozen);
            b.qkv.visit_mut(&Site::MsaQkv.layer_name(bi), f);
            b.proj.visit_mut(&Site::MsaProj.layer_name(bi), f);
            f(format!("blocks.{bi}.ln2.gain"), &mut b.ln2.gain, Role::Frozen);
            f(format!("blocks.{bi}.ln2.bias"), &mut b.ln2.bias, Role::Frozen);
            f(format!("blocks.{bi}.mlp.fc.weight"), &mut b.fc.w, Role::Frozen);
            f(format!("blocks.{bi}.mlp.fc.bias"), &mut b.fc.b, Role::Frozen);
            b.out.visit_mut(&Site::MlpOut.layer_name(bi), f);
        }
        f("ln_f.gain".into(), &mut self.ln_f.gain, Role::Frozen);
        f("ln_f.bias".into(), &mut self.ln_f.bias, Role::Frozen);
        f("head.weight".into(), &mut self.head.w, Role::Head);
        f("head.bias".into(), &mut self.head.b, Role::Head);
    }

    /// `(name, tensor, role)` for every parameter, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Matrix, Role)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, m, r| out.push((n, m, r)));
        out
    }

    pub fn param_count(&self, role: Role) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, m, r| {
            if r == role {
                total += m.len();
            }
        });
        total
    }

    pub fn total_param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, m, _| total += m.len());
        total
    }

    /// Overwrites the named tensor; the shape must match.
    pub fn set_param(&mut self, name: &str, value: &Matrix) -> Result<()> {
        let mut result = Err(contract(format!("no parameter named {name}")));
        self.visit_params_mut(&mut |n, m, _| {
            if n == name {
                result = m.expect_same_shape(value, "set_param").map(|_| *m = value.clone());
            }
        });
        result
    }
}

fn track<'a>(
    captured: &mut Option<(String, &'a HydraLinear, BranchNodes)>,
    name: String,
    layer: &'a Layer,
    nodes: Option<BranchNodes>,
) {
    if let (Layer::Hydra(h), Some(nodes)) = (layer, nodes) {
        *captured = Some((name, h, nodes));
    }
}

fn branch_features(
    cx: &mut ForwardCtx,
    cls_rows: &[usize],
    layer_name: String,
    layer: &HydraLinear,
    nodes: BranchNodes,
) -> Result<BranchFeatures> {
    let pick = |cx: &ForwardCtx, id: NodeId| -> Result<Matrix> {
        let v = cx.tape.value(id);
        let mut out = Matrix::zeros(cls_rows.len(), v.cols());
        for (i, &r) in cls_rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(v.row(r));
        }
        Ok(out)
    };
    let pretrained = pick(cx, nodes.pretrained)?;
    let zeros = Matrix::zeros(pretrained.rows(), pretrained.cols());
    let parallel = nodes.parallel.map(|id| pick(cx, id)).transpose()?.unwrap_or_else(|| zeros.clone());
    let sequential = nodes.sequential.map(|id| pick(cx, id)).transpose()?.unwrap_or_else(|| zeros.clone());
    let output = pick(cx, nodes.output)?;
    let sequential_bias = match (&layer.sequential, cx.use_adapters) {
        (Some(b), true) => matmul_nt(&layer.b0, &b.dense())?.scale(layer.spec.scaling),
        _ => Matrix::zeros(1, layer.out_features()),
    };
    Ok(BranchFeatures {
        layer: layer_name,
        pretrained,
        parallel,
        sequential,
        output,
        bias: layer.b0.clone(),
        sequential_bias,
    })
}
