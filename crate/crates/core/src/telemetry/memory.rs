//! Analytic model of the extra memory each strategy needs for similarity and
//! projection work.
//!
//! Model-level PCGrad processes vectors as long as the whole model, costing
//! `c · P · b` bytes for `P` parameters of `b` bytes each. Module-level
//! strategies never hold more than the largest module, at most `P / f`
//! parameters, plus a small per-module bookkeeping cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategies::StrategyKind;

/// Bytes per decimal gigabyte, the unit used in memory reports.
pub const GB: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Scratch bytes per model byte for model-level similarity and projection.
    pub pcgrad_factor: f64,
    /// Scratch per input-vector byte of a single similarity computation.
    /// Reported alongside the estimate; the estimate itself uses
    /// `pcgrad_factor`.
    pub similarity_factor: f64,
    /// The largest module holds at most `1 / module_fraction` of parameters.
    pub module_fraction: f64,
    pub bookkeeping_bytes_per_module: u64,
    pub modules: u64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        Self {
            pcgrad_factor: 4.5,
            similarity_factor: 2.5,
            module_fraction: 20.0,
            bookkeeping_bytes_per_module: 64,
            // 6 encoder + 6 decoder layers: 6·8 + 6·13 + 2
            modules: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub strategy: StrategyKind,
    #[serde(rename = "params")]
    pub param_count: u64,
    pub bytes_per_element: u32,
    pub extra_bytes: u64,
    pub ratio_vs_pcgrad: f64,
}

impl MemoryEstimate {
    pub fn extra_gb(&self) -> f64 {
        self.extra_bytes as f64 / GB
    }

    /// Percentage of PCGrad's extra memory that this strategy avoids.
    pub fn saving_percent(&self) -> f64 {
        (1.0 - self.ratio_vs_pcgrad) * 100.0
    }
}

impl MemoryModel {
    fn raw_extra(&self, strategy: StrategyKind, params: f64, bytes: f64) -> f64 {
        match strategy {
            StrategyKind::Sum => 0.0,
            StrategyKind::PcGradModel => self.pcgrad_factor * params * bytes,
            StrategyKind::Mgcm | StrategyKind::Discard => {
                self.pcgrad_factor * (params / self.module_fraction) * bytes
                    + (self.bookkeeping_bytes_per_module * self.modules) as f64
            }
        }
    }

    pub fn estimate(&self, strategy: StrategyKind, param_count: u64, bytes_per_element: u32) -> Result<MemoryEstimate> {
        if param_count == 0 {
            return Err(Error::config("params", "must be positive"));
        }
        if ![2, 4, 8].contains(&bytes_per_element) {
            return Err(Error::config("bytes", format!("{bytes_per_element} is not one of 2, 4, 8")));
        }
        let (p, b) = (param_count as f64, bytes_per_element as f64);
        let extra = self.raw_extra(strategy, p, b);
        let pcgrad = self.raw_extra(StrategyKind::PcGradModel, p, b);
        Ok(MemoryEstimate {
            strategy,
            param_count,
            bytes_per_element,
            extra_bytes: extra.round() as u64,
            ratio_vs_pcgrad: extra / pcgrad,
        })
    }
}

/// Estimate under the default constants.
pub fn estimate_extra_memory(strategy: StrategyKind, param_count: u64, bytes_per_element: u32) -> Result<MemoryEstimate> {
    MemoryModel::default().estimate(strategy, param_count, bytes_per_element)
}
