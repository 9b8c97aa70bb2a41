//! Synthetic multi-task datasets with one primary and two auxiliary targets.
//!
//! `seq_triplet` maps a token sequence to three targets: the sequence passed
//! through a fixed token permutation (primary), the sequence itself (first
//! auxiliary) and the sequence reversed (second auxiliary).
//!
//! `engineered_regression` is a block-linear regression. All three targets
//! share the true weights and the label noise on every block except one
//! designated block, where the auxiliary weights are
//! `(1 − 2κ) · w_primary` for conflict knob `κ`. At `κ = 0` the tasks agree
//! exactly; at `κ = 1` the designated block pulls the opposite way.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Decoder start tokens, one per task; content tokens start after them.
pub const TASK_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    SeqTriplet,
    EngineeredRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub mode: BenchmarkMode,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub dataset_size: usize,
    pub conflict_knob: f64,
    pub seed: u64,
    /// Regression feature blocks (engineered mode).
    pub blocks: usize,
    /// Features per block (engineered mode).
    pub width: usize,
    /// Block whose auxiliary targets are anti-aligned (engineered mode).
    pub designated_block: usize,
    /// Label noise standard deviation (engineered mode).
    pub noise: f64,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.conflict_knob) {
            return Err(Error::config("conflict_knob", format!("{} is outside [0, 1]", self.conflict_knob)));
        }
        match self.mode {
            BenchmarkMode::SeqTriplet => {
                if self.seq_len < 2 {
                    return Err(Error::config("seq_len", "must be at least 2"));
                }
                if self.vocab_size < 4 {
                    return Err(Error::config("vocab_size", "must be at least 4"));
                }
            }
            BenchmarkMode::EngineeredRegression => {
                if self.blocks == 0 || self.width == 0 {
                    return Err(Error::config("blocks", "blocks and width must be at least 1"));
                }
                if self.designated_block >= self.blocks {
                    return Err(Error::config("designated_block", "must index an existing block"));
                }
                if !(self.noise >= 0.0 && self.noise.is_finite()) {
                    return Err(Error::config("noise", "must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeqExample {
    pub source: Vec<usize>,
    pub primary: Vec<usize>,
    pub aux1: Vec<usize>,
    pub aux2: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionExample {
    pub features: Vec<f64>,
    pub primary: f64,
    pub aux1: f64,
    pub aux2: f64,
}

impl RegressionExample {
    pub fn target(&self, task: usize) -> f64 {
        match task {
            0 => self.primary,
            1 => self.aux1,
            _ => self.aux2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Dataset {
    Seq {
        train: Vec<SeqExample>,
        eval: Vec<SeqExample>,
        /// Token map used for the primary target.
        permutation: Vec<usize>,
    },
    Regression {
        train: Vec<RegressionExample>,
        eval: Vec<RegressionExample>,
        primary_weights: Vec<f64>,
        aux_weights: Vec<f64>,
    },
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        match self {
            Dataset::Seq { train, .. } => train.len(),
            Dataset::Regression { train, .. } => train.len(),
        }
    }

    pub fn mode(&self) -> BenchmarkMode {
        match self {
            Dataset::Seq { .. } => BenchmarkMode::SeqTriplet,
            Dataset::Regression { .. } => BenchmarkMode::EngineeredRegression,
        }
    }

    /// Hex SHA-256 of the serialized dataset; equal datasets hash equally.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("dataset serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Targets for one source under a token map: (mapped, copy, reversed).
pub fn triplet_targets(source: &[usize], permutation: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let primary = source
        .iter()
        .map(|&t| {
            permutation
                .get(t)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("token {t} outside the permutation table")))
        })
        .collect::<Result<Vec<_>>>()?;
    let reversed = source.iter().rev().copied().collect();
    Ok((primary, source.to_vec(), reversed))
}

/// Held-out examples generated after the training set.
pub fn eval_size(dataset_size: usize) -> usize {
    (dataset_size / 4).max(16)
}

pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_eval = eval_size(spec.dataset_size);
    match spec.mode {
        BenchmarkMode::SeqTriplet => {
            let mut content: Vec<usize> = (TASK_TOKENS..spec.vocab_size).collect();
            content.shuffle(&mut rng);
            let mut permutation: Vec<usize> = (0..spec.vocab_size).collect();
            for (from, to) in (TASK_TOKENS..spec.vocab_size).zip(content) {
                permutation[from] = to;
            }
            let make = |rng: &mut ChaCha8Rng| -> Result<SeqExample> {
                let source: Vec<usize> = (0..spec.seq_len)
                    .map(|_| rng.gen_range(TASK_TOKENS..spec.vocab_size))
                    .collect();
                let (primary, aux1, aux2) = triplet_targets(&source, &permutation)?;
                Ok(SeqExample {
                    source,
                    primary,
                    aux1,
                    aux2,
                })
            };
            let train = (0..spec.dataset_size).map(|_| make(&mut rng)).collect::<Result<_>>()?;
            let eval = (0..n_eval).map(|_| make(&mut rng)).collect::<Result<_>>()?;
            Ok(Dataset::Seq {
                train,
                eval,
                permutation,
            })
        }
        BenchmarkMode::EngineeredRegression => {
            let dim = spec.blocks * spec.width;
            let mut primary_weights = Vec::with_capacity(dim);
            for _ in 0..spec.blocks {
                let block: Vec<f64> = (0..spec.width).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                primary_weights.extend(block.iter().map(|v| v / norm));
            }
            let mut aux_weights = primary_weights.clone();
            let d = spec.designated_block * spec.width;
            let factor = 1.0 - 2.0 * spec.conflict_knob;
            for w in &mut aux_weights[d..d + spec.width] {
                *w *= factor;
            }
            let make = |rng: &mut ChaCha8Rng| {
                let features: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let z: f64 = StandardNormal.sample(rng);
                let noise = spec.noise * z;
                let dot = |w: &[f64]| features.iter().zip(w).map(|(x, w)| x * w).sum::<f64>();
                let primary = dot(&primary_weights) + noise;
                let aux = dot(&aux_weights) + noise;
                RegressionExample {
                    features,
                    primary,
                    aux1: aux,
                    aux2: aux,
                }
            };
            let train = (0..spec.dataset_size).map(|_| make(&mut rng)).collect();
            let eval = (0..n_eval).map(|_| make(&mut rng)).collect();
            Ok(Dataset::Regression {
                train,
                eval,
                primary_weights,
                aux_weights,
            })
        }
    }
}
