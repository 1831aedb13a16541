//! Supervised training with early stopping, dual-criterion checkpointing
//! and grid search, plus the pseudo-labeling semi-supervised loop.

mod checkpoint;
mod early_stop;
mod grid;
mod optim;
mod ssl;
mod supervised;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointMeta};
pub use early_stop::{EarlyStopper, Verdict};
pub use grid::{hyperparameter_search, results_to_csv, search_with, SearchGrid, SearchResult};
pub use optim::{Optimizer, OptimizerKind, Scheduler, SchedulerKind};
pub use ssl::{
    generate_pseudo_labels, round_log_to_csv, train_semi_supervised, HybridSslRunner,
    InnerRunner, RoundLogEntry, SslConfig,
};
pub use supervised::{
    epochs_to_csv, evaluate, evaluate_dsc, run_training, train_supervised, EpochLog, LossKind,
    TrainConfig, TrainOutcome, TrainSession,
};
