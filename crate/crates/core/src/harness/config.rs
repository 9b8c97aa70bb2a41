use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::benchmark::{BenchmarkMode, BenchmarkSpec};
use crate::strategies::StrategyKind;
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub mode: BenchmarkMode,
    pub seq_len: usize,
    pub dataset_size: usize,
    pub conflict_knob: f64,
    pub seed: u64,
    pub blocks: usize,
    pub width: usize,
    pub designated_block: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mode: BenchmarkMode::SeqTriplet,
            seq_len: 6,
            dataset_size: 256,
            conflict_knob: 0.0,
            seed: 0,
            blocks: 6,
            width: 8,
            designated_block: 0,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: StrategyKind,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Heavy-ball momentum on the combined gradient; 0 is plain descent.
    pub momentum: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Mgcm,
            steps: 200,
            batch_size: 8,
            lr: 0.05,
            seed: 0,
            momentum: 0.0,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TelemetryConfig {
    pub events: bool,
    pub masking: bool,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            events: true,
            masking: true,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub telemetry: TelemetryConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Engineered-regression defaults used by the strategy comparison.
    pub fn engineered(strategy: StrategyKind, conflict_knob: f64, seed: u64) -> Self {
        Self {
            data: DataConfig {
                mode: BenchmarkMode::EngineeredRegression,
                dataset_size: 512,
                conflict_knob,
                seed,
                ..DataConfig::default()
            },
            train: TrainConfig {
                strategy,
                steps: 2000,
                batch_size: 16,
                lr: 0.02,
                seed,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            mode: self.data.mode,
            seq_len: self.data.seq_len,
            vocab_size: self.model.vocab_size,
            dataset_size: self.data.dataset_size,
            conflict_knob: self.data.conflict_knob,
            seed: self.data.seed,
            blocks: self.data.blocks,
            width: self.data.width,
            designated_block: self.data.designated_block,
            noise: self.data.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.mode == BenchmarkMode::SeqTriplet {
            self.model.validate()?;
        }
        self.benchmark_spec().validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
