//! Optimisers, learning-rate schedules, data sets and the training loops.

mod config;
pub mod data;
mod optim;
mod run;
mod schedule;

pub use config::{OptimizerKind, Schedule, TrainConfig, Warmup};
pub use data::{Dataset, Domain, Example, Split, SyntheticTaskSpec};
pub use optim::{adamw_step, sgd_step, AdamState, Optimizer};
pub use run::{evaluate, finetune, pretrain, train_epochs, RunRecord};
pub use schedule::schedule_lr;
