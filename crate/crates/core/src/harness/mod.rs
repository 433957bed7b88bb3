//! Datasets, experiment configuration, the end-to-end pipeline and report
//! aggregation.

mod config;
mod dataset;
mod merge;
mod pipeline;

pub use config::{
    AttackSpec, ClassifierSpec, DatasetSpec, DiffusionSpec, ExperimentConfig, FinetuneSpec, Overrides, StageSeeds,
    SweepSpec,
};
pub use dataset::{gen_dataset, Dataset, DatasetKind, Split, DATASET_MAGIC, DATASET_VERSION};
pub use merge::{merge_reports, MergedRow, MergedTable, COLUMNS};
pub use pipeline::{
    evaluate, evaluate_defense, prepare, run_pipeline, smoke_config, Artifacts, ModelDigests, PipelineReport,
    SweepPoint, TableRow, ADBM, DIFFPURE,
};
