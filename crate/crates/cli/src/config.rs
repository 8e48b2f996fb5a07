//! TOML experiment configuration. Every field has a default, so an empty
//! file (or no file) describes the standard comparison grid.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hydra_peft::train::{SyntheticTaskSpec, TrainConfig};
use hydra_peft::{AdapterSpec, ModelConfig, Placement};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// One fine-tuning arm of the comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub adapter: AdapterSpec,
    /// Defaults to the model's placement; ignored for identity adapters.
    #[serde(default)]
    pub placement: Option<Placement>,
}

impl Variant {
    pub fn new(name: &str, adapter: AdapterSpec) -> Self {
        Self {
            name: name.to_string(),
            adapter,
            placement: None,
        }
    }

    /// Where adapters go for this variant; empty for head-only tuning.
    pub fn effective_placement(&self, model: &ModelConfig) -> Placement {
        if self.adapter.is_identity() {
            Placement::none()
        } else {
            self.placement.clone().unwrap_or_else(|| model.placement.clone())
        }
    }
}

pub fn default_variants() -> Vec<Variant> {
    vec![
        Variant::new("head_only", AdapterSpec::none()),
        Variant::new("lora", AdapterSpec::lora(4)),
        Variant::new("seqlora", AdapterSpec::seq_lora(4)),
        Variant::new("hydra", AdapterSpec::hydra(4)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Backbone shape and the default adapter placement.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub source: SyntheticTaskSpec,
    pub target: SyntheticTaskSpec,
    pub variants: Vec<Variant>,
    /// Fine-tuning seeds; each (variant, seed) pair is one cell.
    pub seeds: Vec<u64>,
    /// Seed of the backbone initialisation and pretraining run.
    pub base_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            source: SyntheticTaskSpec::source(),
            target: SyntheticTaskSpec::target(),
            variants: default_variants(),
            seeds: vec![0, 1, 2],
            base_seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate().map_err(|msg| CliError::Config {
            path: origin.to_path_buf(),
            msg,
        })?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config {
                    path: p.to_path_buf(),
                    msg: e.to_string(),
                })?;
                Self::from_toml(&text, p)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serialisable")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.variants.is_empty() {
            return Err("at least one variant is required".into());
        }
        if self.seeds.is_empty() {
            return Err("at least one seed is required".into());
        }
        let mut names = BTreeSet::new();
        for v in &self.variants {
            if !names.insert(v.name.as_str()) {
                return Err(format!("duplicate variant name {:?}", v.name));
            }
            let probe = ModelConfig {
                placement: v.effective_placement(&self.model),
                adapter: v.adapter.clone(),
                ..self.model.clone()
            };
            probe.validate().map_err(|e| format!("variant {}: {e}", v.name))?;
        }
        self.model.validate().map_err(|e| e.to_string())?;
        for (what, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            t.validate().map_err(|e| format!("{what}: {e}"))?;
        }
        for (what, task) in [("source", &self.source), ("target", &self.target)] {
            task.validate().map_err(|e| format!("{what}: {e}"))?;
            if task.vocab != self.model.vocab || task.seq_len != self.model.seq_len {
                return Err(format!("{what} task vocab/seq_len must match the model"));
            }
        }
        Ok(())
    }

    pub fn variant(&self, name: &str) -> CliResult<&Variant> {
        self.variants.iter().find(|v| v.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
            CliError::Usage(format!("unknown variant {name:?}; known: {}", known.join(", ")))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let cfg = ExperimentConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_override() {
        let text = r#"
            seeds = [5]
            [finetune]
            epochs = 2
            [[variants]]
            name = "lora8"
            adapter = { parallel_rank = 8, sequential_rank = 0 }
            placement = ["mlp_out"]
        "#;
        let cfg = ExperimentConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.seeds, vec![5]);
        assert_eq!(cfg.finetune.epochs, 2);
        assert_eq!(cfg.finetune.lr, TrainConfig::finetune_default().lr);
        assert_eq!(cfg.variants.len(), 1);
        assert_eq!(cfg.variants[0].adapter.parallel_rank, 8);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in ["seeds = []", "variants = []", "bogus = 1", "[model]\nheads = 5"] {
            assert!(ExperimentConfig::from_toml(text, Path::new("x.toml")).is_err(), "{text}");
        }
        let dup = "[[variants]]\nname = \"a\"\n[[variants]]\nname = \"a\"\n";
        assert!(ExperimentConfig::from_toml(dup, Path::new("x.toml")).is_err());
    }

    #[test]
    fn unknown_variant_is_usage_error() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(cfg.variant("nope"), Err(CliError::Usage(_))));
        assert_eq!(cfg.variant("hydra").unwrap().adapter, AdapterSpec::hydra(4));
    }
}
