use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSpec;
use crate::error::{contract, Result};
use crate::params::Role;

/// Token id reserved for the `[CLS]` position (always position 0).
pub const CLS_TOKEN: usize = 0;

/// A linear layer of a block that may carry adapter branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Fused query/key/value projection of the attention block.
    MsaQkv,
    /// Output projection of the attention block.
    MsaProj,
    /// Final linear layer of the MLP block.
    MlpOut,
}

impl Site {
    pub fn layer_name(self, block: usize) -> String {
        match self {
            Site::MsaQkv => format!("blocks.{block}.attn.qkv"),
            Site::MsaProj => format!("blocks.{block}.attn.proj"),
            Site::MlpOut => format!("blocks.{block}.mlp.out"),
        }
    }
}

/// Set of adapted sites, applied to every block.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement(pub BTreeSet<Site>);

impl Placement {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(sites: &[Site]) -> Self {
        Self(sites.iter().copied().collect())
    }

    /// MSA output projection plus the MLP output layer.
    pub fn projections() -> Self {
        Self::of(&[Site::MsaProj, Site::MlpOut])
    }

    pub fn contains(&self, site: Site) -> bool {
        self.0.contains(&site)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Vocabulary size including the `[CLS]` token.
    pub vocab: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Sequence length including the `[CLS]` position.
    pub seq_len: usize,
    pub num_classes: usize,
    pub placement: Placement,
    pub adapter: AdapterSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            embed_dim: 64,
            mlp_hidden: 256,
            heads: 4,
            blocks: 4,
            seq_len: 17,
            num_classes: 4,
            placement: Placement::projections(),
            adapter: AdapterSpec::hydra(4),
        }
    }
}

/// Name, shape and role of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: Role,
}

impl ParamSpec {
    fn new(name: String, rows: usize, cols: usize, role: Role) -> Self {
        Self { name, rows, cols, role }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(contract(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.seq_len == 0 {
            return Err(contract("seq_len must be >= 1"));
        }
        if self.vocab < 2 || self.num_classes == 0 || self.mlp_hidden == 0 {
            return Err(contract("vocab >= 2, num_classes >= 1 and mlp_hidden >= 1 required"));
        }
        for site in &self.placement.0 {
            let (d, k) = self.site_shape(*site);
            self.adapter.validate(d, k)?;
        }
        self.adapter.validate_scalars()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// `(out, in)` of the linear layer at `site`.
    pub fn site_shape(&self, site: Site) -> (usize, usize) {
        let d = self.embed_dim;
        match site {
            Site::MsaQkv => (3 * d, d),
            Site::MsaProj => (d, d),
            Site::MlpOut => (d, self.mlp_hidden),
        }
    }

    /// Same config with no adapted sites.
    pub fn without_adapters(&self) -> Self {
        Self {
            placement: Placement::none(),
            ..self.clone()
        }
    }

    /// Every parameter tensor the model built from this config holds, in the
    /// model's canonical order. Computed without allocating weights, so it also
    /// serves for full-size dimension accounting.
    pub fn param_layout(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let mut out = vec![
            ParamSpec::new("embed.token".into(), self.vocab, d, Role::Frozen),
            ParamSpec::new("embed.position".into(), self.seq_len, d, Role::Frozen),
        ];
        let linear = |out: &mut Vec<ParamSpec>, name: String, rows: usize, cols: usize, site: Option<Site>| {
            out.push(ParamSpec::new(format!("{name}.weight"), rows, cols, Role::Frozen));
            out.push(ParamSpec::new(format!("{name}.bias"), 1, rows, Role::Frozen));
            if site.is_some_and(|s| self.placement.contains(s)) {
                let (ra, rb) = (self.adapter.parallel_rank, self.adapter.sequential_rank);
                if ra > 0 {
                    out.push(ParamSpec::new(format!("{name}.a_up"), rows, ra, Role::Adapter));
                    out.push(ParamSpec::new(format!("{name}.a_down"), ra, cols, Role::Adapter));
                }
                if rb > 0 {
                    out.push(ParamSpec::new(format!("{name}.b_up"), rows, rb, Role::Adapter));
                    out.push(ParamSpec::new(format!("{name}.b_down"), rb, rows, Role::Adapter));
                }
            }
        };
        let norm = |out: &mut Vec<ParamSpec>, name: String| {
            out.push(ParamSpec::new(format!("{name}.gain"), 1, d, Role::Frozen));
            out.push(ParamSpec::new(format!("{name}.bias"), 1, d, Role::Frozen));
        };
        for b in 0..self.blocks {
            norm(&mut out, format!("blocks.{b}.ln1"));
            linear(&mut out, Site::MsaQkv.layer_name(b), 3 * d, d, Some(Site::MsaQkv));
            linear(&mut out, Site::MsaProj.layer_name(b), d, d, Some(Site::MsaProj));
            norm(&mut out, format!("blocks.{b}.ln2"));
            linear(&mut out, format!("blocks.{b}.mlp.fc"), self.mlp_hidden, d, None);
            linear(&mut out, Site::MlpOut.layer_name(b), d, self.mlp_hidden, Some(Site::MlpOut));
        }
        norm(&mut out, "ln_f".into());
        out.push(ParamSpec::new("head.weight".into(), self.num_classes, d, Role::Head));
        out.push(ParamSpec::new("head.bias".into(), 1, self.num_classes, Role::Head));
        out
    }

    /// Adapter parameters over all blocks and sites.
    pub fn adapter_param_count(&self) -> usize {
        self.placement
            .0
            .iter()
            .map(|&s| {
                let (d, k) = self.site_shape(s);
                self.adapter.param_count(d, k)
            })
            .sum::<usize>()
            * self.blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_base_mlp_out_adapter_count() {
        let cfg = ModelConfig {
            vocab: 2,
            embed_dim: 768,
            mlp_hidden: 3072,
            heads: 12,
            blocks: 12,
            seq_len: 197,
            num_classes: 100,
            placement: Placement::of(&[Site::MlpOut]),
            adapter: AdapterSpec::new(2, 2),
        };
        assert_eq!(cfg.adapter_param_count(), 129_024);
        let from_layout: usize = cfg
            .param_layout()
            .iter()
            .filter(|p| p.role == Role::Adapter)
            .map(ParamSpec::len)
            .sum();
        assert_eq!(from_layout, 129_024);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            ModelConfig { heads: 5, ..ModelConfig::default() },
            ModelConfig { seq_len: 0, ..ModelConfig::default() },
            ModelConfig { adapter: AdapterSpec::new(0, 65), ..ModelConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert!(ModelConfig::default().validate().is_ok());
    }
}
