//! Argument parsing and the subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hydra_peft::analysis::{
    export_branch_features, param_report, pe_score, similarity_grid, Branch, PeInput, DEFAULT_I_MAX_FRAC,
    DEFAULT_J_MAX, DEFAULT_M0,
};
use hydra_peft::train::Split;
use hydra_peft::{Error, Role};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Dtype};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, EXIT_NUMERICAL, EXIT_OK};
use crate::experiment::{
    bench_threads, evaluate_on, finetune_variant, merge_checkpoint, pretrain_base, render_table, run_bench,
};

#[derive(Debug, Parser)]
#[command(name = "hydra-peft", version, about = "Parallel + sequential low-rank adapters on a micro transformer")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed override (backbone seed for pretrain/bench, fine-tune seed for finetune).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's output_dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Store checkpoint payloads as 64-bit floats.
    #[arg(long = "f64", global = true)]
    pub f64: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Similarity,
    Features,
    Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Source,
    Target,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the backbone on the source task and write `base.hydr`.
    Pretrain,
    /// Fine-tune one variant on top of a base checkpoint.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        variant: String,
    },
    /// Fold all adapters into the frozen weights.
    Merge {
        #[arg(long)]
        adapted: PathBuf,
    },
    /// Test-split accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        task: TaskArg,
        #[arg(long, default_value_t = 512)]
        examples: usize,
    },
    /// Subspace similarity grids, branch features or parameter counts.
    Analyze {
        #[arg(long)]
        adapted: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Accuracy fraction for the PE score (params mode).
        #[arg(long)]
        accuracy: Option<f64>,
        /// Feature-export batch size.
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = DEFAULT_I_MAX_FRAC)]
        i_max_frac: f64,
        #[arg(long, default_value_t = DEFAULT_J_MAX)]
        j_max: usize,
    },
    /// Run the full variant × seed grid and write a summary table.
    Bench,
    /// PE score of an (accuracy, trainable parameter count) pair.
    Score {
        #[arg(long)]
        accuracy: f64,
        #[arg(long)]
        params: f64,
        #[arg(long, default_value_t = DEFAULT_M0)]
        m0: f64,
    },
}

struct Env {
    cfg: ExperimentConfig,
    out: PathBuf,
    seed: Option<u64>,
    dtype: Dtype,
}

impl Env {
    fn new(common: &Common) -> CliResult<Self> {
        let cfg = ExperimentConfig::load(common.config.as_deref())?;
        let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Self {
            cfg,
            out,
            seed: common.seed,
            dtype: if common.f64 { Dtype::F64 } else { Dtype::F32 },
        })
    }

    fn out_path(&self, file: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(CliError::io(format!("creating {}", self.out.display())))?;
        Ok(self.out.join(file))
    }

    fn write_json(&self, file: &str, value: &impl Serialize) -> CliResult<PathBuf> {
        let path = self.out_path(file)?;
        let text = serde_json::to_string_pretty(value).expect("reports are serialisable");
        std::fs::write(&path, text).map_err(CliError::io(format!("writing {}", path.display())))?;
        Ok(path)
    }

    fn write_text(&self, file: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.out_path(file)?;
        std::fs::write(&path, text).map_err(CliError::io(format!("writing {}", path.display())))?;
        Ok(path)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<i32> {
    if let Command::Score { accuracy, params, m0 } = &cli.command {
        let inp = PeInput {
            accuracy: *accuracy,
            trainable_params: *params,
            m0: *m0,
        };
        inp.validate()?;
        println!("PE {:.3}", pe_score(&inp));
        return Ok(EXIT_OK);
    }
    let env = Env::new(&cli.common)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&env),
        Command::Finetune { base, variant } => cmd_finetune(&env, base, variant),
        Command::Merge { adapted } => cmd_merge(&env, adapted),
        Command::Eval {
            checkpoint,
            task,
            examples,
        } => cmd_eval(&env, checkpoint, *task, *examples),
        Command::Analyze {
            adapted,
            base,
            mode,
            accuracy,
            batch,
            i_max_frac,
            j_max,
        } => cmd_analyze(&env, adapted, base, *mode, *accuracy, *batch, *i_max_frac, *j_max),
        Command::Bench => cmd_bench(&env),
        Command::Score { .. } => unreachable!("handled above"),
    }
}

fn cmd_pretrain(env: &Env) -> CliResult<i32> {
    let seed = env.seed.unwrap_or(env.cfg.base_seed);
    let (model, report) = pretrain_base(&env.cfg, seed)?;
    let ck = Checkpoint::from_model(&model, env.dtype, serde_json::json!({ "stage": "pretrain", "seed": seed }));
    let path = env.out_path("base.hydr")?;
    ck.save(&path)?;
    let rep = env.write_json("pretrain_report.json", &report)?;
    println!(
        "pretrained: source accuracy {:.4}, {} params -> {} ({})",
        report.source_accuracy,
        report.params.total,
        path.display(),
        rep.display()
    );
    Ok(EXIT_OK)
}

fn cmd_finetune(env: &Env, base: &Path, variant: &str) -> CliResult<i32> {
    let variant = env.cfg.variant(variant)?.clone();
    let seed = env.seed.unwrap_or(env.cfg.seeds[0]);
    let base_ck = Checkpoint::load(base)?;
    if base_ck.count(Role::Adapter) != 0 {
        return Err(CliError::Usage(format!("{} is not a base checkpoint", base.display())));
    }
    let base_model = base_ck.to_model()?;
    let (model, report) = finetune_variant(&env.cfg, &base_model, &variant, seed)?;
    let meta = serde_json::json!({
        "stage": "finetune",
        "variant": variant.name,
        "seed": seed,
        "base": base.display().to_string(),
    });
    let name = format!("{}-seed{seed}", variant.name);
    let path = env.out_path(&format!("{name}.hydr"))?;
    Checkpoint::from_model(&model, env.dtype, meta).save(&path)?;
    let rep = env.write_json(&format!("{name}.json"), &report)?;
    println!(
        "{}: target accuracy {:.4}, {} adapter + {} head params -> {} ({})",
        variant.name,
        report.target_accuracy,
        report.params.adapter_params,
        report.params.head_params,
        path.display(),
        rep.display()
    );
    Ok(EXIT_OK)
}

fn cmd_merge(env: &Env, adapted: &Path) -> CliResult<i32> {
    let ck = Checkpoint::load(adapted)?;
    let (merged, report) = merge_checkpoint(&ck, env.seed.unwrap_or(0))?;
    let name = format!("{}-merged", stem(adapted));
    let path = env.out_path(&format!("{name}.hydr"))?;
    merged.save(&path)?;
    let rep = env.write_json(&format!("{name}.json"), &report)?;
    println!(
        "merged {} layers, max |Δlogit| over {} probes = {:.3e} -> {} ({})",
        report.folded_layers.len(),
        report.probes,
        report.max_abs_deviation,
        path.display(),
        rep.display()
    );
    Ok(EXIT_OK)
}

fn cmd_eval(env: &Env, checkpoint: &Path, task: TaskArg, examples: usize) -> CliResult<i32> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let spec = match task {
        TaskArg::Source => &env.cfg.source,
        TaskArg::Target => &env.cfg.target,
    };
    let accuracy = evaluate_on(&model, spec, examples)?;
    println!("{}", serde_json::json!({ "checkpoint": checkpoint.display().to_string(), "accuracy": accuracy }));
    Ok(EXIT_OK)
}

/// Frozen tensors of `base` must exist in `adapted` with the same shapes.
fn check_consistent(adapted: &Checkpoint, base: &Checkpoint) -> CliResult<()> {
    for t in base.tensors.iter().filter(|t| t.role == Role::Frozen) {
        match adapted.tensor(&t.name) {
            Some(a) if a.value.shape() == t.value.shape() => {}
            Some(a) => {
                return Err(CliError::Usage(format!(
                    "shape mismatch for {}: adapted {} vs base {}",
                    t.name,
                    a.value.shape(),
                    t.value.shape()
                )))
            }
            None => return Err(CliError::Usage(format!("adapted checkpoint lacks {}", t.name))),
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GridSummary {
    layer: String,
    branch: Branch,
    file: Option<String>,
    skipped: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    env: &Env,
    adapted: &Path,
    base: &Path,
    mode: AnalyzeMode,
    accuracy: Option<f64>,
    batch: usize,
    i_max_frac: f64,
    j_max: usize,
) -> CliResult<i32> {
    let adapted_ck = Checkpoint::load(adapted)?;
    let base_ck = Checkpoint::load(base)?;
    check_consistent(&adapted_ck, &base_ck)?;
    let mut model = adapted_ck.to_model()?;
    model.set_mode(hydra_peft::Mode::Inference);

    match mode {
        AnalyzeMode::Similarity => {
            let mut summary = Vec::new();
            for (bi, block) in model.blocks.iter().enumerate() {
                for site in [hydra_peft::Site::MsaQkv, hydra_peft::Site::MsaProj, hydra_peft::Site::MlpOut] {
                    let Some(h) = block.site(site).as_hydra() else { continue };
                    let layer = site.layer_name(bi);
                    let branches = [
                        (Branch::Parallel, h.parallel.is_some()),
                        (Branch::Sequential, h.sequential.is_some()),
                    ];
                    for (branch, _) in branches.into_iter().filter(|b| b.1) {
                        let tag = match branch {
                            Branch::Parallel => "parallel",
                            Branch::Sequential => "sequential",
                        };
                        match similarity_grid(&model, bi, site, branch, i_max_frac, j_max) {
                            Ok(grid) => {
                                let file = format!("similarity-{layer}-{tag}.csv");
                                env.write_text(&file, &grid.to_csv())?;
                                summary.push(GridSummary {
                                    layer: layer.clone(),
                                    branch,
                                    file: Some(file),
                                    skipped: None,
                                });
                            }
                            Err(Error::DegenerateAdapter(msg)) => summary.push(GridSummary {
                                layer: layer.clone(),
                                branch,
                                file: None,
                                skipped: Some(msg),
                            }),
                            Err(e) => return Err(e.into()),
                        }
                    }
                }
            }
            if summary.is_empty() {
                return Err(CliError::Usage("checkpoint has no adapted layers".into()));
            }
            let path = env.write_json("similarity.json", &summary)?;
            let written = summary.iter().filter(|s| s.file.is_some()).count();
            println!("wrote {written} similarity grids ({} degenerate) -> {}", summary.len() - written, path.display());
        }
        AnalyzeMode::Features => {
            if batch == 0 {
                return Err(CliError::Usage("--batch must be >= 1".into()));
            }
            let data = env.cfg.target.generate(Split::Test, batch)?;
            let tokens: Vec<Vec<usize>> = data.examples.iter().map(|e| e.tokens.clone()).collect();
            let path = env.out_path("features.csv")?;
            export_branch_features(&model, &tokens, &path)?;
            println!("wrote {} feature rows -> {}", 3 * batch, path.display());
        }
        AnalyzeMode::Params => {
            let report = param_report(&model);
            let pe = match accuracy {
                Some(a) => {
                    let inp = PeInput::new(a, report.trainable() as f64)?;
                    Some(pe_score(&inp))
                }
                None => None,
            };
            let value = serde_json::json!({ "params": report, "accuracy": accuracy, "pe": pe });
            let path = env.write_json("params.json", &value)?;
            println!(
                "adapter {} head {} frozen {} total {} trainable {:.4}M",
                report.adapter_params, report.head_params, report.frozen_params, report.total, report.trainable_millions
            );
            if let Some(pe) = pe {
                println!("PE {pe:.3}");
            }
            println!("-> {}", path.display());
        }
    }
    Ok(EXIT_OK)
}

fn cmd_bench(env: &Env) -> CliResult<i32> {
    let mut cfg = env.cfg.clone();
    if let Some(seed) = env.seed {
        cfg.base_seed = seed;
    }
    let report = run_bench(&cfg, bench_threads())?;
    let table = render_table(&report);
    let json = env.write_json("bench_report.json", &report)?;
    let md = env.write_text("bench_table.md", &table)?;
    print!("{table}");
    println!("-> {} ({})", md.display(), json.display());
    Ok(if report.all_failed() { EXIT_NUMERICAL } else { EXIT_OK })
}
