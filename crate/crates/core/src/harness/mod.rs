//! Benchmark data, the training loop, strategy studies and run configuration.

pub mod benchmark;
pub mod config;
pub mod study;
pub mod train;

pub use benchmark::{generate_benchmark, BenchmarkMode, BenchmarkSpec, Dataset};
pub use config::{DataConfig, Precision, RunConfig, TelemetryConfig, TrainConfig};
pub use study::{compare_strategies, load_study, study_report, StudyReport};
pub use train::{train, RunResult, RunSummary, StepLoss};
