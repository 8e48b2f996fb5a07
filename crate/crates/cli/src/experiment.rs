//! Pretrain → fine-tune → merge pipeline and the comparison grid.

use std::fmt::Write as _;

use hydra_peft::analysis::{param_report, ParamReport};
use hydra_peft::train::{evaluate, finetune, pretrain, RunRecord, Split, SyntheticTaskSpec};
use hydra_peft::{MicroTransformer, Mode, Rng, Role};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Variant};
use crate::error::{CliError, CliResult};

const MODEL_STREAM: u64 = 0x004d_4f44_454c;
const ADAPTER_STREAM: u64 = 0x0041_4441_5054;
const PROBE_STREAM: u64 = 0x0050_524f_4245;

/// Environment variable capping bench parallelism.
pub const THREADS_ENV: &str = "HYDRA_PEFT_THREADS";

pub const MERGE_PROBES: usize = 64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub source_accuracy: f64,
    pub params: ParamReport,
    pub record: RunRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub variant: String,
    pub seed: u64,
    pub target_accuracy: f64,
    pub params: ParamReport,
    pub trainable_fraction: f64,
    pub record: RunRecord,
}

/// Builds the backbone from `seed` and trains it on the source task.
pub fn pretrain_base(cfg: &ExperimentConfig, seed: u64) -> CliResult<(MicroTransformer, PretrainReport)> {
    let mut model = MicroTransformer::build(
        &cfg.model.without_adapters(),
        &mut Rng::derived(seed, MODEL_STREAM),
    )?;
    let tcfg = hydra_peft::train::TrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    let train = cfg.source.generate(Split::Train, tcfg.train_examples)?;
    let eval = cfg.source.generate(Split::Test, tcfg.eval_examples)?;
    let record = pretrain(&mut model, &train, &eval, &tcfg)?;
    let source_accuracy = match record.final_accuracy() {
        Some(a) => a,
        None => evaluate(&model, &eval)?,
    };
    let report = PretrainReport {
        seed,
        source_accuracy,
        params: param_report(&model),
        record,
    };
    Ok((model, report))
}

/// Freezes `base`, installs the variant's adapters and a fresh head, and
/// fine-tunes on the target task.
pub fn finetune_variant(
    cfg: &ExperimentConfig,
    base: &MicroTransformer,
    variant: &Variant,
    seed: u64,
) -> CliResult<(MicroTransformer, FinetuneReport)> {
    let mut model = base.clone();
    let mut rng = Rng::derived(seed, ADAPTER_STREAM);
    model.install_adapters(&variant.effective_placement(&cfg.model), &variant.adapter, &mut rng)?;
    model.reset_head(cfg.target.num_classes, &mut rng)?;
    model.set_mode(Mode::Finetune);
    let tcfg = hydra_peft::train::TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let train = cfg.target.generate(Split::Train, tcfg.train_examples)?;
    let eval = cfg.target.generate(Split::Test, tcfg.eval_examples)?;
    let record = finetune(&mut model, &train, &eval, &tcfg)?;
    let target_accuracy = match record.final_accuracy() {
        Some(a) => a,
        None => evaluate(&model, &eval)?,
    };
    let params = param_report(&model);
    let report = FinetuneReport {
        variant: variant.name.clone(),
        seed,
        target_accuracy,
        trainable_fraction: params.trainable_fraction(),
        params,
        record,
    };
    Ok((model, report))
}

pub fn evaluate_on(model: &MicroTransformer, task: &SyntheticTaskSpec, examples: usize) -> CliResult<f64> {
    let data = task.generate(Split::Test, examples)?;
    Ok(evaluate(model, &data)?)
}

/// Random `[CLS]`-prefixed token sequences.
pub fn probe_tokens(model: &MicroTransformer, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = Rng::derived(seed, PROBE_STREAM);
    let (vocab, seq) = (model.config.vocab, model.config.seq_len);
    (0..n)
        .map(|_| {
            (0..seq)
                .map(|p| if p == 0 { hydra_peft::model::CLS_TOKEN } else { 1 + rng.below(vocab - 1) })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergeReport {
    pub folded_layers: Vec<String>,
    pub probes: usize,
    /// Max |logit| difference between the stored adapted model and the
    /// stored merged model.
    pub max_abs_deviation: f64,
}

/// Folds every adapted layer. The self-test compares both forms as they
/// come out of their checkpoints, so payload rounding is included.
pub fn merge_checkpoint(adapted: &Checkpoint, probe_seed: u64) -> CliResult<(Checkpoint, MergeReport)> {
    if adapted.count(Role::Adapter) == 0 {
        return Err(CliError::Usage("checkpoint has no adapter tensors to merge".into()));
    }
    let mut model = adapted.to_model()?;
    model.set_mode(Mode::Inference);
    let folded_layers = model.adapted_layers().into_iter().map(|(n, _)| n).collect();
    let mut folded = model.fold_all();
    folded.set_mode(Mode::Inference);

    let meta = serde_json::json!({ "merged_from": adapted.meta });
    let merged = Checkpoint::from_model(&folded, adapted.dtype, meta);
    let mut reloaded = merged.to_model()?;
    reloaded.set_mode(Mode::Inference);
    let probes = probe_tokens(&model, MERGE_PROBES, probe_seed);
    let max_abs_deviation = reloaded
        .logits(&probes)?
        .max_abs_diff(&model.logits(&probes)?)?;
    Ok((
        merged,
        MergeReport {
            folded_layers,
            probes: MERGE_PROBES,
            max_abs_deviation,
        },
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub report: Option<FinetuneReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub trainable_params: usize,
    pub params_millions: f64,
    pub trainable_fraction: f64,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds (0 with one seed).
    pub std_accuracy: f64,
    /// Mean wall-clock seconds per epoch over all epochs of all seeds.
    pub sec_per_epoch: f64,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub pretrain: PretrainReport,
    pub rows: Vec<BenchRow>,
    pub cells: Vec<Cell>,
    pub threads: usize,
}

impl BenchReport {
    pub fn row(&self, variant: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn all_failed(&self) -> bool {
        self.cells.iter().all(|c| c.report.is_none())
    }

    /// Accuracy of every successful cell, in grid order.
    pub fn accuracies(&self) -> Vec<(String, u64, f64)> {
        self.cells
            .iter()
            .filter_map(|c| c.report.as_ref().map(|r| (c.variant.clone(), c.seed, r.target_accuracy)))
            .collect()
    }
}

/// Thread budget: `HYDRA_PEFT_THREADS` if set and positive, else the
/// machine's parallelism.
pub fn bench_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pretrains once, then runs every (variant, seed) cell on up to `threads`
/// workers. Cell failures are recorded, not propagated.
pub fn run_bench(cfg: &ExperimentConfig, threads: usize) -> CliResult<BenchReport> {
    let (base, pretrain) = pretrain_base(cfg, cfg.base_seed)?;
    let jobs: Vec<(&Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let cells: Vec<Cell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, seed)| match finetune_variant(cfg, &base, v, seed) {
                Ok((_, report)) => Cell {
                    variant: v.name.clone(),
                    seed,
                    report: Some(report),
                    error: None,
                },
                Err(e) => Cell {
                    variant: v.name.clone(),
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });

    let rows = cfg
        .variants
        .iter()
        .map(|v| {
            let ok: Vec<&FinetuneReport> = cells
                .iter()
                .filter(|c| c.variant == v.name)
                .filter_map(|c| c.report.as_ref())
                .collect();
            let accs: Vec<f64> = ok.iter().map(|r| r.target_accuracy).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&accs);
            let epochs: Vec<f64> = ok.iter().flat_map(|r| r.record.epoch_seconds.iter().copied()).collect();
            let (sec_per_epoch, _) = mean_std(&epochs);
            let params = ok.first().map(|r| r.params);
            BenchRow {
                variant: v.name.clone(),
                trainable_params: params.map_or(0, |p| p.trainable()),
                params_millions: params.map_or(0.0, |p| p.trainable_millions),
                trainable_fraction: params.map_or(f64::NAN, |p| p.trainable_fraction()),
                mean_accuracy,
                std_accuracy,
                sec_per_epoch,
                seeds_ok: ok.len(),
                seeds_failed: cfg.seeds.len() - ok.len(),
            }
        })
        .collect();
    Ok(BenchReport {
        pretrain,
        rows,
        cells,
        threads,
    })
}

/// Markdown table: variant, trainable params, accuracy mean ± std (%),
/// seconds per epoch.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Backbone: {} params, source accuracy {:.1}%",
        report.pretrain.params.total,
        100.0 * report.pretrain.source_accuracy
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "| variant | params (M) | trainable % | accuracy % (mean ± std) | sec/epoch | seeds |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.2} | {:.1} ± {:.1} | {:.2} | {}/{} |",
            r.variant,
            r.params_millions,
            100.0 * r.trainable_fraction,
            100.0 * r.mean_accuracy,
            100.0 * r.std_accuracy,
            r.sec_per_epoch,
            r.seeds_ok,
            r.seeds_ok + r.seeds_failed
        );
    }
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        let _ = writeln!(
            out,
            "\nfailed: {} seed {}: {}",
            c.variant,
            c.seed,
            c.error.as_deref().unwrap_or_default()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn probes_start_with_cls() {
        let model = MicroTransformer::build(&hydra_peft::ModelConfig::default(), &mut Rng::new(0)).unwrap();
        let p = probe_tokens(&model, 5, 1);
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|t| t[0] == 0 && t.len() == 17 && t[1..].iter().all(|&x| x > 0 && x < 32)));
        assert_eq!(p, probe_tokens(&model, 5, 1));
    }
}
