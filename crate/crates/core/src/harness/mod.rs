//! Synthetic two-domain tasks, the end-to-end adaptation run, evaluation
//! and supervised model selection.

mod data;
mod run;
mod select;

pub use data::{fnv1a, make_two_domain_dataset, standardize_example, BaseTask, DomainShift, Split, SyntheticDomainSpec, TwoDomainDataset, STD_FLOOR};
pub use run::{
    evaluate, evaluate_flip_averaged, hard_shift_spec, pretrain, train_uda, train_uda_from, Evaluation, LogEntry, MetricsLog, RunConfig,
    SubgroupAccuracy, TrainedRun, SCHEMA_VERSION,
};
pub use select::{evaluate_config, mean_and_stderr, select_model, ConfigOutcome, PretrainCache, Selection};
