//! Training, evaluation, ablation runs and result export.

pub mod ablation;
pub mod export;
pub mod metrics;
pub mod train;

pub use ablation::{evaluate, AblationResults, run_ablation, run_job, run_queue, windows, JobResult, RunOptions, SceneCorpus};
pub use export::{content_hash, hash_files, RunManifest};
pub use metrics::{ade, fde, Aggregate, MetricsCell, MetricsReport};
pub use train::{
    goal_accuracy, holdout, sample_errors, train, EpochRecord, StageKind, StageSpec, StageSummary, TrainOutcome,
    TrainPlan,
};
