use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{schedule_lr, Dataset, Optimizer, TrainConfig};
use crate::error::{contract, Error, Result};
use crate::linalg::Rng;
use crate::model::{MicroTransformer, Mode};
use crate::params::Role;

const EVAL_BATCH: usize = 128;
// Stream labels for the generators derived from the training seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// Per-epoch history of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Mean minibatch loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Accuracy on the evaluation set after each epoch.
    pub eval_accuracy: Vec<f64>,
    /// Learning rate of every step, grouped by epoch.
    pub lr_trace: Vec<Vec<f64>>,
    pub epoch_seconds: Vec<f64>,
    pub adapter_params: usize,
    pub head_params: usize,
    pub total_params: usize,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.eval_accuracy.last().copied()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
        }
    }
}

/// Fraction of examples whose arg-max logit (lowest index on ties) matches
/// the label.
pub fn evaluate(model: &MicroTransformer, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(contract("cannot evaluate on an empty data set"));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (tokens, labels) = data.batch(chunk);
        let logits = model.logits(&tokens)?;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Minibatch cross-entropy training of whatever the model's mode makes
/// trainable.
pub fn train_epochs(
    model: &mut MicroTransformer,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    if model.mode() == Mode::Inference {
        return Err(contract("model is in inference mode"));
    }
    let mut record = RunRecord {
        adapter_params: model.param_count(Role::Adapter),
        head_params: model.param_count(Role::Head),
        total_params: model.total_param_count(),
        ..RunRecord::default()
    };
    if cfg.epochs == 0 {
        return Ok(record);
    }
    if train.is_empty() {
        return Err(contract("empty training set"));
    }
    if let Some(e) = train.examples.iter().find(|e| e.label >= model.config.num_classes) {
        return Err(contract(format!(
            "label {} exceeds the head's {} classes",
            e.label, model.config.num_classes
        )));
    }

    let steps_per_epoch = cfg.steps_per_epoch(train.len());
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = cfg.warmup.steps(steps_per_epoch, total_steps);
    if warmup >= total_steps && warmup > 0 {
        return Err(contract(format!("warmup {warmup} steps >= total {total_steps} steps")));
    }

    let started = Instant::now();
    let mut shuffle_rng = Rng::derived(cfg.seed, SHUFFLE_STREAM);
    let mut optimizer = Optimizer::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lrs = Vec::with_capacity(steps_per_epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = schedule_lr(cfg.schedule, step, total_steps, warmup, cfg.lr);
            let (tokens, labels) = train.batch(chunk);
            let mut cx = model.context(true, Rng::derived(cfg.seed ^ DROPOUT_STREAM, step as u64));
            cx.hidden_dropout = cfg.dropout;
            let out = model.forward(&mut cx, &tokens, false)?;
            let loss = cx.tape.cross_entropy_mean(out.logits, &labels)?;
            let loss_value = cx.tape.scalar(loss)?;
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: loss_value,
                });
            }
            let mut grads = cx.tape.backward(loss)?;
            let named = cx.param_grads(&mut grads);
            optimizer.step(model, &named, lr)?;
            loss_sum += loss_value;
            lrs.push(lr);
            step += 1;
        }
        record.train_loss.push(loss_sum / steps_per_epoch as f64);
        record.lr_trace.push(lrs);
        record.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
        record.eval_accuracy.push(if eval.is_empty() {
            f64::NAN
        } else {
            evaluate(model, eval)?
        });
    }
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Trains every base parameter (and the head) on the source task.
pub fn pretrain(model: &mut MicroTransformer, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    if model.mode() != Mode::Pretrain {
        return Err(contract("pretrain requires the model in pretrain mode"));
    }
    train_epochs(model, train, eval, cfg)
}

/// Trains adapter factors and head only; base weights stay bit-identical.
pub fn finetune(model: &mut MicroTransformer, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    if model.mode() != Mode::Finetune {
        return Err(contract("finetune requires the model in finetune mode"));
    }
    train_epochs(model, train, eval, cfg)
}
