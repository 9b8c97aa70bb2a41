use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::harness::benchmark::{Dataset, SeqExample};
use crate::harness::config::{Precision, RunConfig};
use crate::registry::{GradientVector, ModuleRegistry};
use crate::regression::BlockRegression;
use crate::strategies::{combine, observe_modules, TaskGradientSet};
use crate::telemetry::{detect_masking, ConflictStats, EventLogWriter, MaskingLogWriter};
use crate::tensor::Scalar;
use crate::transformer::{SeqBatch, ToyTransformer};

pub const TASK_LABELS: [&str; 3] = ["primary", "aux1", "aux2"];

pub const STEP_LOG: &str = "steps.csv";
pub const EVENT_LOG: &str = "events.csv";
pub const MASKING_LOG: &str = "masking.csv";
pub const SUMMARY: &str = "summary.json";
pub const REGISTRY: &str = "registry.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    #[serde(rename = "loss_primary")]
    pub primary: f64,
    #[serde(rename = "loss_aux1")]
    pub aux1: f64,
    #[serde(rename = "loss_aux2")]
    pub aux2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: crate::strategies::StrategyKind,
    pub seed: u64,
    pub fingerprint: String,
    pub dataset_fingerprint: String,
    /// Training-batch losses, recorded before each update.
    pub trajectory: Vec<StepLoss>,
    /// Primary loss on the held-out split before any update.
    pub initial_primary_loss: f64,
    /// Primary loss on the held-out split after the last update.
    pub final_primary_loss: f64,
    pub conflict_events: u64,
    pub masking_episodes: u64,
    pub param_count: usize,
    pub module_count: usize,
    pub step_log: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
    pub masking_log: Option<PathBuf>,
    pub wall_clock_secs: f64,
    /// Online conflict counters; rebuilt from the event log when loaded.
    #[serde(skip)]
    pub stats: ConflictStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

/// Persisted form of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub result: RunResult,
    pub config: RunConfig,
    pub environment: Environment,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

enum Model<T> {
    Seq(ToyTransformer<T>),
    Regression(BlockRegression<T>),
}

impl<T: Scalar> Model<T> {
    fn build(run: &RunConfig, data: &Dataset) -> Result<(Self, ModuleRegistry)> {
        if data.mode() != run.data.mode {
            return Err(Error::Invalid(format!(
                "dataset is {:?} but the configuration asks for {:?}",
                data.mode(),
                run.data.mode
            )));
        }
        match data {
            Dataset::Seq { train, eval, .. } => {
                let vocab = run.model.vocab_size;
                let too_big = train
                    .iter()
                    .chain(eval)
                    .flat_map(|e| e.source.iter().chain(&e.primary))
                    .any(|&t| t >= vocab);
                if too_big {
                    return Err(Error::Shape {
                        op: "train",
                        detail: format!("dataset tokens exceed the model vocabulary of {vocab}"),
                    });
                }
                let (m, reg) = ToyTransformer::new(run.model, run.train.seed)?;
                Ok((Model::Seq(m), reg))
            }
            Dataset::Regression { train, .. } => {
                let dim = run.data.blocks * run.data.width;
                if let Some(e) = train.iter().find(|e| e.features.len() != dim) {
                    return Err(Error::Shape {
                        op: "train",
                        detail: format!("{} features per example, model expects {dim}", e.features.len()),
                    });
                }
                let (m, reg) = BlockRegression::new(run.data.blocks, run.data.width, run.train.seed)?;
                Ok((Model::Regression(m), reg))
            }
        }
    }

    fn params(&self) -> &ParamStore<T> {
        match self {
            Model::Seq(m) => &m.params,
            Model::Regression(m) => &m.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::Seq(m) => &mut m.params,
            Model::Regression(m) => &mut m.params,
        }
    }

    /// Loss of one task on the selected examples, optionally with its flat
    /// gradient. Every call uses a fresh tape.
    fn task_loss(&self, data: &Dataset, held_out: bool, idx: &[usize], task: usize, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let loss = match (self, data) {
            (Model::Seq(m), Dataset::Seq { train, eval, .. }) => {
                let pool = if held_out { eval } else { train };
                let picked: Vec<&SeqExample> = idx.iter().map(|&i| &pool[i]).collect();
                m.loss(&mut tape, &seq_batch(&picked, task))?
            }
            (Model::Regression(m), Dataset::Regression { train, eval, .. }) => {
                let pool = if held_out { eval } else { train };
                let features: Vec<&[f64]> = idx.iter().map(|&i| pool[i].features.as_slice()).collect();
                let targets: Vec<f64> = idx.iter().map(|&i| pool[i].target(task)).collect();
                m.loss(&mut tape, &features, &targets)?
            }
            _ => return Err(Error::Invalid("dataset mode does not match the model".into())),
        };
        let value = tape.value(loss).data()[0].widen();
        let g = if grad && value.is_finite() {
            Some(self.params().flatten(&tape.backward(loss, self.params())?))
        } else {
            None
        };
        Ok((value, g))
    }

    fn eval_primary(&self, data: &Dataset) -> Result<f64> {
        let n = match data {
            Dataset::Seq { eval, .. } => eval.len(),
            Dataset::Regression { eval, .. } => eval.len(),
        };
        let idx: Vec<usize> = (0..n).collect();
        Ok(self.task_loss(data, true, &idx, 0, false)?.0)
    }
}

/// Teacher-forced batch: the decoder sees the task's start token followed by
/// the target shifted right by one.
pub fn seq_batch(examples: &[&SeqExample], task: usize) -> SeqBatch {
    let mut batch = SeqBatch {
        src: Vec::with_capacity(examples.len()),
        dec_in: Vec::with_capacity(examples.len()),
        targets: Vec::with_capacity(examples.len()),
    };
    for e in examples {
        let target = match task {
            0 => &e.primary,
            1 => &e.aux1,
            _ => &e.aux2,
        };
        let mut dec_in = Vec::with_capacity(target.len());
        dec_in.push(task);
        dec_in.extend_from_slice(&target[..target.len() - 1]);
        batch.src.push(e.source.clone());
        batch.dec_in.push(dec_in);
        batch.targets.push(target.clone());
    }
    batch
}

struct Sinks {
    steps: csv::Writer<Box<dyn Write>>,
    events: Option<EventLogWriter<Box<dyn Write>>>,
    masking: Option<MaskingLogWriter<Box<dyn Write>>>,
}

fn sink(dir: Option<&Path>, name: &str) -> Result<Box<dyn Write>> {
    Ok(match dir {
        Some(d) => Box::new(BufWriter::new(File::create(d.join(name))?)),
        None => Box::new(std::io::sink()),
    })
}

/// Runs one configuration on a prepared dataset. When `run.out` is set, the
/// step, event and masking logs plus a summary are written there.
pub fn train(run: &RunConfig, data: &Dataset) -> Result<RunResult> {
    run.validate()?;
    match run.train.precision {
        Precision::F32 => train_typed::<f32>(run, data),
        Precision::F64 => train_typed::<f64>(run, data),
    }
}

fn train_typed<T: Scalar>(run: &RunConfig, data: &Dataset) -> Result<RunResult> {
    let started = Instant::now();
    let (mut model, reg) = Model::<T>::build(run, data)?;
    let n_train = data.train_len();
    let dir = run.out.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join(REGISTRY), reg.manifest_json()?)?;
    }
    let mut sinks = Sinks {
        steps: csv::WriterBuilder::new().has_headers(false).from_writer(sink(dir, STEP_LOG)?),
        events: if run.telemetry.events {
            Some(EventLogWriter::new(sink(dir, EVENT_LOG)?)?)
        } else {
            None
        },
        masking: if run.telemetry.masking {
            Some(MaskingLogWriter::new(sink(dir, MASKING_LOG)?)?)
        } else {
            None
        },
    };
    // Header even for an empty trajectory.
    sinks.steps.write_record(["step", "loss_primary", "loss_aux1", "loss_aux2"])?;

    let mut sampler = ChaCha8Rng::seed_from_u64(run.train.seed);
    sampler.set_stream(1);
    let kind = run.train.strategy;
    let mut stats = ConflictStats::new();
    let mut trajectory = Vec::with_capacity(run.train.steps);
    let mut velocity = vec![0.0; reg.total()];
    let mut conflict_events = 0u64;
    let mut masking_episodes = 0u64;

    let initial_primary_loss = model.eval_primary(data)?;
    if !initial_primary_loss.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            task: "primary".into(),
            value: initial_primary_loss,
        });
    }

    for step in 0..run.train.steps {
        let idx: Vec<usize> = (0..run.train.batch_size).map(|_| sampler.gen_range(0..n_train)).collect();
        let mut losses = [0.0; 3];
        let mut grads = Vec::with_capacity(3);
        for (task, label) in TASK_LABELS.iter().enumerate() {
            let (loss, g) = model.task_loss(data, false, &idx, task, true)?;
            let g = g.filter(|g| g.iter().all(|v| v.is_finite()));
            match g {
                Some(g) if loss.is_finite() => {
                    losses[task] = loss;
                    grads.push(GradientVector::new(*label, g));
                }
                _ => {
                    return Err(Error::Diverged {
                        step,
                        task: (*label).into(),
                        value: loss,
                    })
                }
            }
        }
        let primary = grads.remove(0);
        let ts = TaskGradientSet::new(primary, grads, step)?;
        let combined = combine(kind, &ts, &reg)?;
        let mut events = combined.events;
        if !kind.uses_registry() {
            events.extend(observe_modules(&ts, &reg)?);
        }
        stats.record_step(&events)?;
        conflict_events += events.iter().filter(|e| e.conflict && e.module_id >= 0).count() as u64;
        if let Some(w) = sinks.events.as_mut() {
            w.write_events(&events, &reg)?;
        }
        if run.telemetry.masking {
            let records = detect_masking(&ts, &reg)?;
            masking_episodes += records.len() as u64;
            if let Some(w) = sinks.masking.as_mut() {
                w.write_records(&records)?;
            }
        }
        let record = StepLoss {
            step,
            primary: losses[0],
            aux1: losses[1],
            aux2: losses[2],
        };
        sinks.steps.serialize(record)?;
        trajectory.push(record);

        let direction = if run.train.momentum > 0.0 {
            for (v, g) in velocity.iter_mut().zip(&combined.total.values) {
                *v = run.train.momentum * *v + g;
            }
            &velocity
        } else {
            &combined.total.values
        };
        model.params_mut().descend(direction, run.train.lr)?;
    }

    let final_primary_loss = model.eval_primary(data)?;
    if !final_primary_loss.is_finite() {
        return Err(Error::Diverged {
            step: run.train.steps,
            task: "primary".into(),
            value: final_primary_loss,
        });
    }

    sinks.steps.flush()?;
    if let Some(mut w) = sinks.events.take() {
        w.flush()?;
    }
    if let Some(w) = sinks.masking.take() {
        w.finish()?.flush()?;
    }

    let path_of = |name: &str, enabled: bool| dir.filter(|_| enabled).map(|d| d.join(name));
    let result = RunResult {
        strategy: kind,
        seed: run.train.seed,
        fingerprint: run.fingerprint(),
        dataset_fingerprint: data.fingerprint(),
        trajectory,
        initial_primary_loss,
        final_primary_loss,
        conflict_events,
        masking_episodes,
        param_count: reg.total(),
        module_count: reg.len(),
        step_log: path_of(STEP_LOG, true),
        event_log: path_of(EVENT_LOG, run.telemetry.events),
        masking_log: path_of(MASKING_LOG, run.telemetry.masking),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        stats,
    };
    if let Some(d) = dir {
        let summary = RunSummary {
            result: result.clone(),
            config: run.clone(),
            environment: Environment::current(),
        };
        std::fs::write(d.join(SUMMARY), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(result)
}
