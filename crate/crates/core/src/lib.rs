//! Module-level gradient conflict mitigation for multi-task training.
//!
//! The crate bundles a reverse-mode autodiff tape, a toy encoder-decoder
//! transformer whose parameters are partitioned into named modules, the
//! gradient combination strategies (plain sum, model-level PCGrad, per-module
//! discard and per-module projection), conflict telemetry, and a harness that
//! trains on synthetic multi-task data.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod harness;
pub mod registry;
pub mod regression;
pub mod strategies;
pub mod telemetry;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use registry::{GradientVector, ModuleDescriptor, ModuleKind, ModuleRegistry};
pub use strategies::{combine, StrategyKind, TaskGradientSet};
