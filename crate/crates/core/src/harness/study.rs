//! Multi-seed strategy comparison.
//!
//! [`study_report`] depends only on run results, so a report rebuilt from
//! persisted summaries matches the one produced at the end of the study.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::benchmark::generate_benchmark;
use crate::harness::config::RunConfig;
use crate::harness::train::{train, RunResult, RunSummary, SUMMARY};
use crate::strategies::StrategyKind;
use crate::telemetry::paired_permutation_test;

pub const STUDY_RESAMPLES: usize = 10_000;
pub const STUDY_TEST_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub final_primary_loss: f64,
    pub masking_episodes: u64,
}

/// MGCM against one baseline over the shared seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: StrategyKind,
    /// Seeds where MGCM's final primary loss is at most the baseline's.
    pub mgcm_wins: usize,
    pub seeds: usize,
    /// `None` with fewer than two seeds.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub comparisons: Vec<Comparison>,
}

impl StudyReport {
    pub fn row(&self, strategy: StrategyKind, seed: u64) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.seed == seed)
    }

    pub fn comparison(&self, baseline: StrategyKind) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.baseline == baseline)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("strategy,seed,final_primary_loss,masking_episodes\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.strategy, r.seed, r.final_primary_loss, r.masking_episodes);
        }
        if !self.comparisons.is_empty() {
            s.push_str("\nbaseline,mgcm_wins,seeds,p_value\n");
            for c in &self.comparisons {
                let p = c.p_value.map_or_else(|| "-".to_string(), |p| p.to_string());
                let _ = writeln!(s, "{},{},{},{}", c.baseline, c.mgcm_wins, c.seeds, p);
            }
        }
        s
    }
}

const ORDER: [StrategyKind; 4] = [
    StrategyKind::Sum,
    StrategyKind::PcGradModel,
    StrategyKind::Discard,
    StrategyKind::Mgcm,
];

fn rank(k: StrategyKind) -> usize {
    ORDER.iter().position(|o| *o == k).unwrap_or(ORDER.len())
}

/// Builds the comparison table from finished runs.
pub fn study_report(results: &[RunResult]) -> Result<StudyReport> {
    let mut by_key: BTreeMap<(usize, u64), &RunResult> = BTreeMap::new();
    let mut data_by_seed: BTreeMap<u64, &str> = BTreeMap::new();
    for r in results {
        if by_key.insert((rank(r.strategy), r.seed), r).is_some() {
            return Err(Error::Invalid(format!("duplicate run for {} seed {}", r.strategy, r.seed)));
        }
        match data_by_seed.get(&r.seed) {
            Some(fp) if *fp != r.dataset_fingerprint => {
                return Err(Error::Invalid(format!("runs with seed {} were trained on different datasets", r.seed)))
            }
            _ => {
                data_by_seed.insert(r.seed, &r.dataset_fingerprint);
            }
        }
    }
    let rows = by_key
        .values()
        .map(|r| StudyRow {
            strategy: r.strategy,
            seed: r.seed,
            final_primary_loss: r.final_primary_loss,
            masking_episodes: r.masking_episodes,
        })
        .collect();

    let losses_of = |k: StrategyKind| -> BTreeMap<u64, f64> {
        results
            .iter()
            .filter(|r| r.strategy == k)
            .map(|r| (r.seed, r.final_primary_loss))
            .collect()
    };
    let mgcm = losses_of(StrategyKind::Mgcm);
    let mut comparisons = Vec::new();
    if !mgcm.is_empty() {
        let strategies: BTreeSet<usize> = results.iter().map(|r| rank(r.strategy)).collect();
        for k in strategies.into_iter().map(|i| ORDER[i]).filter(|k| *k != StrategyKind::Mgcm) {
            let base = losses_of(k);
            let paired: Vec<(f64, f64)> = mgcm
                .iter()
                .filter_map(|(seed, m)| base.get(seed).map(|b| (*m, *b)))
                .collect();
            let (a, b): (Vec<f64>, Vec<f64>) = paired.iter().copied().unzip();
            let p_value = if paired.len() >= 2 {
                Some(paired_permutation_test(&a, &b, STUDY_RESAMPLES, STUDY_TEST_SEED)?)
            } else {
                None
            };
            comparisons.push(Comparison {
                baseline: k,
                mgcm_wins: paired.iter().filter(|(m, b)| m <= b).count(),
                seeds: paired.len(),
                p_value,
            });
        }
    }
    Ok(StudyReport { rows, comparisons })
}

/// Checks that configs differ only in strategy and seed, and that configs
/// sharing a training seed share their data.
pub fn validate_study(configs: &[RunConfig]) -> Result<()> {
    let first = configs.first().ok_or_else(|| Error::Invalid("a study needs at least one run".into()))?;
    let normalize = |c: &RunConfig| {
        let mut n = c.clone();
        n.train.strategy = StrategyKind::Sum;
        n.train.seed = 0;
        n.data.seed = 0;
        n.out = None;
        n
    };
    let reference = normalize(first);
    let mut data_seed: BTreeMap<u64, u64> = BTreeMap::new();
    for c in configs {
        if normalize(c) != reference {
            return Err(Error::Invalid(
                "study configs may differ only in strategy and seed".into(),
            ));
        }
        if *data_seed.entry(c.train.seed).or_insert(c.data.seed) != c.data.seed {
            return Err(Error::Invalid(format!(
                "runs with seed {} use inconsistent datasets",
                c.train.seed
            )));
        }
    }
    Ok(())
}

/// Output directory of one run inside a study directory.
pub fn run_dir(root: &Path, strategy: StrategyKind, seed: u64) -> PathBuf {
    root.join(format!("{strategy}_seed{seed}"))
}

/// Runs every config (in parallel, each run sequential internally) and
/// tabulates the outcome. Results come back in input order.
pub fn compare_strategies(configs: &[RunConfig]) -> Result<(StudyReport, Vec<RunResult>)> {
    validate_study(configs)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(configs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<RunResult>>> = Vec::new();
    slots.resize_with(configs.len(), || None);
    let slots = std::sync::Mutex::new(slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                let out = generate_benchmark(&cfg.benchmark_spec()).and_then(|data| train(cfg, &data));
                slots.lock().expect("no poisoned runs")[i] = Some(out);
            });
        }
    });
    let results = slots
        .into_inner()
        .expect("no poisoned runs")
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect::<Result<Vec<_>>>()?;
    Ok((study_report(&results)?, results))
}

/// Loads every `*/summary.json` below `root`, sorted by path.
pub fn load_study(root: &Path) -> Result<Vec<RunResult>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Invalid(format!("no run summaries under {}", root.display())));
    }
    dirs.iter().map(|d| Ok(RunSummary::load(&d.join(SUMMARY))?.result)).collect()
}
