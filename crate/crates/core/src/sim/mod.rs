//! Synthetic two-modality benchmark and a toy two-branch detector.

pub mod config;
pub mod data;
pub mod model;
pub mod pipeline;
pub mod suite;
pub mod train;

pub use config::RunConfig;
pub use data::{derive_seed, gen_sample, GeneratorConfig, SyntheticSample};
pub use model::{Encoder, ModelSpec, ToyModel};
pub use pipeline::{backward, forward, forward_frozen, forward_with_scores, Detached, ForwardCache, Gradients};
pub use train::{
    eval_restricted, gradient_bias, thresholded_iou, train, windowed_bias, EvalMode, FeatureGradRecord,
    FixedSamples, SampleSource, StepRecord, SyntheticStream, TrainOutcome,
};
pub use suite::{
    eval_set, expand_cells, run_experiment_suite, run_experiment_suite_with, run_single, AblationRow, Aggregate,
    CellObserver, CellResult, CellSpec, EvalScores, ExperimentReport, RunResult, RunSummary, Stat, SuiteSpec,
};
