//! Experiment driver: synthetic datasets, configuration, the per-seed
//! pipeline, sweeps, checkpoints and reporting.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;
pub mod selftest;

pub use config::ExperimentConfig;
pub use dataset::{make_dataset, DatasetPair, DatasetSpec, Family, Task};
pub use experiment::{run_all, run_experiment, run_seed, sweep, PretrainCache};
pub use report::{aggregate, AggregateRow, Axis, MetricsRecord, Summary};
