//! Training, cross-validation and evaluation.

mod baseline;
mod crossval;
mod metrics;
mod optim;
mod report;
mod train;

pub use baseline::{clinical_cox_baseline, LinearCox};
pub use metrics::concordance_index;
pub use optim::{cosine_lr, AdamW};
pub use train::{dc_report, fold_seed, run_fold, train_model, EpochStats, FoldOutcome, SurvReduction, TrainConfig, TrainedModel};
pub use crossval::{checkpoint_name, crossval, crossval_to_dir, explain_checkpoints, run_folds, CrossvalOutput};
pub use report::{
    fold_record, parse_report, read_report, write_crossval_report, write_explain_report, write_json, AnyReport,
    CrossvalReport, CrossvalSummary, ExplainFold, ExplainReport, FoldRecord, ShareSummary, Stat, CROSSVAL_SCHEMA,
    DC_EVALUATION, EXPLAIN_SCHEMA, REPORT_VERSION,
};
pub(crate) use train::blocks_of;
