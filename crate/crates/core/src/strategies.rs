//! Combination of one primary and several auxiliary task gradients.
//!
//! Four strategies share one code path. Conflict detection and projection run
//! over a set of spans of the flat gradient: every module span for the
//! module-level strategies, the single span `[0, n)` for model-level PCGrad.
//! Each auxiliary is tested against the unmodified primary only; auxiliaries
//! are never compared with each other and the primary is never modified.

use std::cell::Cell;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{GradientVector, ModuleRegistry};

/// Norms at or below this are treated as having no direction.
pub const NORM_EPS: f64 = 1e-12;

/// `module_id` of events produced by model-level detection.
pub const WHOLE_MODEL: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Sum,
    #[serde(rename = "pcgrad")]
    PcGradModel,
    Discard,
    Mgcm,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Sum,
        StrategyKind::PcGradModel,
        StrategyKind::Discard,
        StrategyKind::Mgcm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Sum => "sum",
            StrategyKind::PcGradModel => "pcgrad",
            StrategyKind::Discard => "discard",
            StrategyKind::Mgcm => "mgcm",
        }
    }

    pub fn uses_registry(self) -> bool {
        matches!(self, StrategyKind::Discard | StrategyKind::Mgcm)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown strategy `{s}` (expected sum, pcgrad, discard or mgcm)")))
    }
}

/// Gradients of all tasks for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradientSet {
    pub primary: GradientVector,
    pub auxiliaries: Vec<GradientVector>,
    pub step_index: usize,
}

impl TaskGradientSet {
    pub fn new(primary: GradientVector, auxiliaries: Vec<GradientVector>, step_index: usize) -> Result<Self> {
        if auxiliaries.is_empty() {
            return Err(Error::Invalid("a task gradient set needs at least one auxiliary".into()));
        }
        if let Some(bad) = auxiliaries.iter().find(|a| a.len() != primary.len()) {
            return Err(Error::Length {
                op: "task_gradient_set",
                expected: primary.len(),
                actual: bad.len(),
            });
        }
        Ok(Self {
            primary,
            auxiliaries,
            step_index,
        })
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    fn check_registry(&self, reg: &ModuleRegistry) -> Result<()> {
        if reg.total() != self.len() {
            return Err(Error::Length {
                op: "combine",
                expected: reg.total(),
                actual: self.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    None,
    Projected,
    Discarded,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::None => "none",
            Action::Projected => "projected",
            Action::Discarded => "discarded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Action::None),
            "projected" => Some(Action::Projected),
            "discarded" => Some(Action::Discarded),
            _ => None,
        }
    }
}

/// Outcome of testing one auxiliary against the primary on one span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictEvent {
    pub step_index: usize,
    /// Module id, or [`WHOLE_MODEL`].
    pub module_id: i64,
    pub aux_index: usize,
    pub dot: f64,
    pub cosine: f64,
    pub conflict: bool,
    pub action: Action,
    /// The primary slice had no direction, so nothing was projected.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Combined {
    pub total: GradientVector,
    pub events: Vec<ConflictEvent>,
}

impl Combined {
    pub fn conflicts(&self) -> usize {
        self.events.iter().filter(|e| e.conflict).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub dot: f64,
    pub cosine: f64,
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Length {
            op,
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn similarity(a: &[f64], b: &[f64]) -> (Similarity, f64, f64) {
    let d = dot(a, b);
    let (na, nb) = (norm(a), norm(b));
    let cosine = if na < NORM_EPS || nb < NORM_EPS {
        0.0
    } else {
        (d / (na * nb)).clamp(-1.0, 1.0)
    };
    (Similarity { dot: d, cosine }, na, nb)
}

/// Inner product and cosine similarity; the cosine is 0 when either norm is
/// below [`NORM_EPS`].
pub fn cos_sim(a: &[f64], b: &[f64]) -> Result<Similarity> {
    check_len("cos_sim", a, b)?;
    Ok(similarity(a, b).0)
}

/// True iff the slices point more than 90° apart. Directionless slices never
/// conflict.
pub fn detect_conflict(primary: &[f64], aux: &[f64]) -> Result<bool> {
    check_len("detect_conflict", primary, aux)?;
    let (s, np, na) = similarity(primary, aux);
    Ok(is_conflict(s.dot, np, na))
}

fn is_conflict(dot: f64, norm_p: f64, norm_a: f64) -> bool {
    dot < 0.0 && norm_p >= NORM_EPS && norm_a >= NORM_EPS
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub values: Vec<f64>,
    /// `‖primary‖` was too small to divide by; `values` is the input unchanged.
    pub degenerate: bool,
}

/// Removes the component of `aux` along `primary`:
/// `aux − (primary·aux / ‖primary‖²) · primary`.
pub fn project(aux: &[f64], primary: &[f64]) -> Result<Projection> {
    check_len("project", primary, aux)?;
    let mut values = aux.to_vec();
    let degenerate = !project_in_place(&mut values, primary, dot(primary, aux), norm(primary));
    Ok(Projection { values, degenerate })
}

fn project_in_place(aux: &mut [f64], primary: &[f64], dot: f64, norm_p: f64) -> bool {
    if norm_p <= NORM_EPS {
        return false;
    }
    let sq = norm_p * norm_p;
    let coeff = dot / sq;
    for (a, p) in aux.iter_mut().zip(primary) {
        *a -= coeff * p;
    }
    // One re-orthogonalization sweep clears the rounding residual along the
    // primary, which matters when aux was nearly anti-parallel.
    let residual = self::dot(aux, primary) / sq;
    for (a, p) in aux.iter_mut().zip(primary) {
        *a -= residual * p;
    }
    true
}

/// Tracks live and peak bytes of transient working buffers.
#[derive(Debug, Default)]
pub struct ScratchMeter {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl ScratchMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak.get()
    }

    pub fn live_bytes(&self) -> usize {
        self.live.get()
    }

    fn copy_of(&self, src: &[f64]) -> ScratchBuf<'_> {
        let bytes = std::mem::size_of_val(src);
        let live = self.live.get() + bytes;
        self.live.set(live);
        self.peak.set(self.peak.get().max(live));
        ScratchBuf {
            data: src.to_vec(),
            bytes,
            meter: self,
        }
    }
}

struct ScratchBuf<'m> {
    data: Vec<f64>,
    bytes: usize,
    meter: &'m ScratchMeter,
}

impl Drop for ScratchBuf<'_> {
    fn drop(&mut self) {
        self.meter.live.set(self.meter.live.get() - self.bytes);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resolution {
    Project,
    Discard,
}

/// Shared surgery loop: for every span and every auxiliary, copy the
/// auxiliary slice into a working buffer, resolve a conflict against the
/// primary slice, and accumulate the result into the total.
fn surgery(
    ts: &TaskGradientSet,
    spans: &[(i64, Range<usize>)],
    resolution: Resolution,
    meter: &ScratchMeter,
) -> Combined {
    let primary = &ts.primary.values;
    let mut total = primary.clone();
    let mut events = Vec::with_capacity(spans.len() * ts.auxiliaries.len());
    for (module_id, span) in spans {
        let p = &primary[span.clone()];
        let norm_p = norm(p);
        for (aux_index, aux) in ts.auxiliaries.iter().enumerate() {
            let mut work = meter.copy_of(&aux.values[span.clone()]);
            let d = dot(p, &work.data);
            let norm_a = norm(&work.data);
            let cosine = if norm_p < NORM_EPS || norm_a < NORM_EPS {
                0.0
            } else {
                (d / (norm_p * norm_a)).clamp(-1.0, 1.0)
            };
            let conflict = is_conflict(d, norm_p, norm_a);
            let degenerate = norm_p <= NORM_EPS;
            let action = match (conflict, resolution) {
                (false, _) => Action::None,
                (true, Resolution::Project) => {
                    if project_in_place(&mut work.data, p, d, norm_p) {
                        Action::Projected
                    } else {
                        Action::None
                    }
                }
                (true, Resolution::Discard) => {
                    work.data.iter_mut().for_each(|v| *v = 0.0);
                    Action::Discarded
                }
            };
            for (t, a) in total[span.clone()].iter_mut().zip(&work.data) {
                *t += a;
            }
            events.push(ConflictEvent {
                step_index: ts.step_index,
                module_id: *module_id,
                aux_index,
                dot: d,
                cosine,
                conflict,
                action,
                degenerate,
            });
        }
    }
    Combined {
        total: GradientVector::new("total", total),
        events,
    }
}

fn module_spans(reg: &ModuleRegistry) -> Vec<(i64, Range<usize>)> {
    reg.modules().iter().map(|m| (m.module_id as i64, m.span())).collect()
}

/// Elementwise `primary + Σ auxiliaries`, summed left to right.
pub fn combine_sum(ts: &TaskGradientSet) -> Combined {
    let mut total = ts.primary.values.clone();
    for aux in &ts.auxiliaries {
        for (t, a) in total.iter_mut().zip(&aux.values) {
            *t += a;
        }
    }
    Combined {
        total: GradientVector::new("total", total),
        events: Vec::new(),
    }
}

/// Model-level PCGrad: detection and projection once over the full vectors.
pub fn combine_pcgrad_model(ts: &TaskGradientSet) -> Combined {
    surgery(ts, &[(WHOLE_MODEL, 0..ts.len())], Resolution::Project, &ScratchMeter::new())
}

/// Per-module detection; conflicting auxiliary slices are zeroed.
pub fn combine_discard(ts: &TaskGradientSet, reg: &ModuleRegistry) -> Result<Combined> {
    ts.check_registry(reg)?;
    Ok(surgery(ts, &module_spans(reg), Resolution::Discard, &ScratchMeter::new()))
}

/// Modular gradient conflict mitigation: per-module detection, conflicting
/// auxiliary slices projected onto the plane orthogonal to the primary slice.
pub fn combine_mgcm(ts: &TaskGradientSet, reg: &ModuleRegistry) -> Result<Combined> {
    ts.check_registry(reg)?;
    Ok(surgery(ts, &module_spans(reg), Resolution::Project, &ScratchMeter::new()))
}

/// Dispatches on `kind`, recording working-buffer usage in `meter`.
pub fn combine_metered(
    kind: StrategyKind,
    ts: &TaskGradientSet,
    reg: &ModuleRegistry,
    meter: &ScratchMeter,
) -> Result<Combined> {
    ts.check_registry(reg)?;
    Ok(match kind {
        StrategyKind::Sum => combine_sum(ts),
        StrategyKind::PcGradModel => surgery(ts, &[(WHOLE_MODEL, 0..ts.len())], Resolution::Project, meter),
        StrategyKind::Discard => surgery(ts, &module_spans(reg), Resolution::Discard, meter),
        StrategyKind::Mgcm => surgery(ts, &module_spans(reg), Resolution::Project, meter),
    })
}

pub fn combine(kind: StrategyKind, ts: &TaskGradientSet, reg: &ModuleRegistry) -> Result<Combined> {
    combine_metered(kind, ts, reg, &ScratchMeter::new())
}

/// Per-module detection only. Every event carries [`Action::None`]; used to
/// monitor strategies that do not inspect modules themselves.
pub fn observe_modules(ts: &TaskGradientSet, reg: &ModuleRegistry) -> Result<Vec<ConflictEvent>> {
    ts.check_registry(reg)?;
    let primary = &ts.primary.values;
    let mut events = Vec::with_capacity(reg.len() * ts.auxiliaries.len());
    for m in reg.modules() {
        let p = &primary[m.span()];
        for (aux_index, aux) in ts.auxiliaries.iter().enumerate() {
            let (s, np, na) = similarity(p, &aux.values[m.span()]);
            events.push(ConflictEvent {
                step_index: ts.step_index,
                module_id: m.module_id as i64,
                aux_index,
                dot: s.dot,
                cosine: s.cosine,
                conflict: is_conflict(s.dot, np, na),
                action: Action::None,
                degenerate: np <= NORM_EPS,
            });
        }
    }
    Ok(events)
}

/// Peak bytes of transient working buffers used by one combine call.
pub fn measured_scratch_memory(kind: StrategyKind, ts: &TaskGradientSet, reg: &ModuleRegistry) -> Result<usize> {
    let meter = ScratchMeter::new();
    combine_metered(kind, ts, reg, &meter)?;
    debug_assert_eq!(meter.live_bytes(), 0);
    Ok(meter.peak_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig1_set() -> (TaskGradientSet, ModuleRegistry) {
        let ts = TaskGradientSet::new(
            GradientVector::new("primary", vec![0.5, 0.4, 0.7, 0.4]),
            vec![GradientVector::new("aux", vec![0.9, 0.8, -0.9, 0.7])],
            0,
        )
        .unwrap();
        (ts, ModuleRegistry::from_spans(&[0..2, 2..4]).unwrap())
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cos_sim_examples() {
        let s = cos_sim(&[0.7, 0.4], &[-0.9, 0.7]).unwrap();
        assert!(close(s.dot, -0.35, 1e-12));
        let s = cos_sim(&[0.3, -2.0], &[0.3, -2.0]).unwrap();
        assert!(close(s.cosine, 1.0, 1e-15));
        let s = cos_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!((s.dot, s.cosine), (0.0, 0.0));
        assert_eq!(cos_sim(&[0.0, 0.0], &[1.0, 1.0]).unwrap().cosine, 0.0);
        assert!(cos_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn detect_conflict_examples() {
        assert!(!detect_conflict(&[0.5, 0.4], &[0.9, 0.8]).unwrap());
        assert!(detect_conflict(&[0.7, 0.4], &[-0.9, 0.7]).unwrap());
        assert!(!detect_conflict(&[0.7, 0.4], &[0.0, 0.0]).unwrap());
        assert!(!detect_conflict(&[1.0, 0.0], &[0.0, 1.0]).unwrap());
        assert!(detect_conflict(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn projection_examples() {
        // coefficient = -0.35 / 0.65
        let r = project(&[-0.9, 0.7], &[0.7, 0.4]).unwrap();
        let c = -0.35 / 0.65;
        assert!(close(r.values[0], -0.9 - c * 0.7, 1e-15));
        assert!(close(r.values[1], 0.7 - c * 0.4, 1e-15));
        assert!(close(r.values[0], -0.523_077, 1e-6));
        assert!(close(r.values[1], 0.915_385, 1e-6));
        assert!(dot(&r.values, &[0.7, 0.4]).abs() < 1e-15);

        let r = project(&[0.0, 3.0], &[2.0, 0.0]).unwrap();
        assert_eq!(r.values, vec![0.0, 3.0]);

        let r = project(&[-1.5, 2.0, -0.25], &[1.5, -2.0, 0.25]).unwrap();
        assert!(r.values.iter().all(|v| v.abs() < 1e-15));

        let r = project(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.values, vec![1.0, 1.0]);
    }

    #[test]
    fn fig1_mgcm_projects_only_decoder() {
        let (ts, reg) = fig1_set();
        let out = combine_mgcm(&ts, &reg).unwrap();
        let proj = project(&[-0.9, 0.7], &[0.7, 0.4]).unwrap().values;
        let expected = [0.5 + 0.9, 0.4 + 0.8, 0.7 + proj[0], 0.4 + proj[1]];
        assert_eq!(out.total.values, expected);
        assert_eq!(out.conflicts(), 1);
        assert_eq!(out.events[0].action, Action::None);
        assert_eq!(out.events[1].action, Action::Projected);
        assert!(close(out.events[0].dot, 0.77, 1e-12));
        assert!(close(out.events[1].dot, -0.35, 1e-12));
    }

    #[test]
    fn fig1_pcgrad_sees_no_conflict() {
        let (ts, _) = fig1_set();
        let out = combine_pcgrad_model(&ts);
        assert_eq!(out.conflicts(), 0);
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].module_id, WHOLE_MODEL);
        assert!(close(out.events[0].dot, 0.42, 1e-12));
        assert_eq!(out.total, combine_sum(&ts).total);
    }

    #[test]
    fn fig1_sum_and_discard() {
        let (ts, reg) = fig1_set();
        let sum = combine_sum(&ts).total.values;
        let expected_sum = [1.4, 1.2, -0.2, 1.1];
        for (a, b) in sum.iter().zip(expected_sum) {
            assert!(close(*a, b, 1e-15));
        }
        let discard = combine_discard(&ts, &reg).unwrap();
        let expected = [1.4, 1.2, 0.7, 0.4];
        for (a, b) in discard.total.values.iter().zip(expected) {
            assert!(close(*a, b, 1e-15));
        }
        assert_eq!(discard.events[1].action, Action::Discarded);
    }

    #[test]
    fn anti_parallel_aux_is_removed() {
        let p = vec![0.3, -1.0, 2.0];
        let ts = TaskGradientSet::new(
            GradientVector::new("p", p.clone()),
            vec![GradientVector::new("a", p.iter().map(|v| -v).collect())],
            0,
        )
        .unwrap();
        let out = combine_pcgrad_model(&ts);
        assert_eq!(out.total.values, p);
        let reg = ModuleRegistry::from_spans(&[0..1, 1..3]).unwrap();
        assert_eq!(combine_discard(&ts, &reg).unwrap().total.values, p);
    }

    #[test]
    fn zero_norm_primary_is_degenerate() {
        let ts = TaskGradientSet::new(
            GradientVector::new("p", vec![0.0, 0.0, 1.0]),
            vec![GradientVector::new("a", vec![-1.0, 2.0, 1.0])],
            3,
        )
        .unwrap();
        let reg = ModuleRegistry::from_spans(&[0..2, 2..3]).unwrap();
        let out = combine_mgcm(&ts, &reg).unwrap();
        assert!(out.events[0].degenerate);
        assert!(!out.events[0].conflict);
        assert_eq!(out.events[0].action, Action::None);
        assert_eq!(out.events[0].step_index, 3);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let p = GradientVector::new("p", vec![1.0, 2.0]);
        assert!(TaskGradientSet::new(p.clone(), vec![], 0).is_err());
        assert!(TaskGradientSet::new(p.clone(), vec![GradientVector::new("a", vec![1.0])], 0).is_err());
        let ts = TaskGradientSet::new(p.clone(), vec![p], 0).unwrap();
        let reg = ModuleRegistry::whole_model(3);
        assert!(combine_mgcm(&ts, &reg).is_err());
        assert!(combine_discard(&ts, &reg).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("adam".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn sum_uses_no_scratch() {
        let (ts, reg) = fig1_set();
        assert_eq!(measured_scratch_memory(StrategyKind::Sum, &ts, &reg).unwrap(), 0);
        assert_eq!(measured_scratch_memory(StrategyKind::PcGradModel, &ts, &reg).unwrap(), 32);
        assert_eq!(measured_scratch_memory(StrategyKind::Mgcm, &ts, &reg).unwrap(), 16);
    }

    fn task_set(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<Vec<f64>>)> {
        prop::collection::vec(1usize..5, 1..5).prop_flat_map(move |lens| {
            let n: usize = lens.iter().sum();
            (Just(lens), prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n), k + 1))
        })
    }

    fn build(lens: &[usize], vecs: &[Vec<f64>]) -> (TaskGradientSet, ModuleRegistry) {
        let mut spans = Vec::new();
        let mut s = 0;
        for l in lens {
            spans.push(s..s + l);
            s += l;
        }
        let ts = TaskGradientSet::new(
            GradientVector::new("p", vecs[0].clone()),
            vecs[1..].iter().map(|v| GradientVector::new("a", v.clone())).collect(),
            0,
        )
        .unwrap();
        (ts, ModuleRegistry::from_spans(&spans).unwrap())
    }

    proptest! {
        #[test]
        fn mgcm_leaves_no_module_conflict((lens, vecs) in task_set(2)) {
            let (ts, reg) = build(&lens, &vecs);
            let out = combine_mgcm(&ts, &reg).unwrap();
            let p = reg.modularize(&ts.primary.values).unwrap();
            for aux in &ts.auxiliaries {
                for (m, ps) in reg.modules().iter().zip(&p) {
                    let a = &aux.values[m.span()];
                    let adjusted = if detect_conflict(ps, a).unwrap() {
                        project(a, ps).unwrap().values
                    } else {
                        a.to_vec()
                    };
                    let d = dot(ps, &adjusted);
                    prop_assert!(d >= -1e-9 * norm(ps) * norm(a));
                }
            }
            prop_assert_eq!(out.events.len(), reg.len() * 2);
        }

        #[test]
        fn primary_contribution_is_exact((lens, vecs) in task_set(2)) {
            let (ts, reg) = build(&lens, &vecs);
            let out = combine_mgcm(&ts, &reg).unwrap();
            // rebuild total from the raw primary plus the adjusted auxiliaries
            let mut expected = ts.primary.values.clone();
            for aux in &ts.auxiliaries {
                for m in reg.modules() {
                    let ps = &ts.primary.values[m.span()];
                    let a = &aux.values[m.span()];
                    let adj = if detect_conflict(ps, a).unwrap() { project(a, ps).unwrap().values } else { a.to_vec() };
                    for (e, v) in expected[m.span()].iter_mut().zip(adj) {
                        *e += v;
                    }
                }
            }
            prop_assert_eq!(out.total.values, expected);
        }

        #[test]
        fn auxiliary_order_does_not_matter((lens, vecs) in task_set(3)) {
            let (ts, reg) = build(&lens, &vecs);
            let mut swapped = ts.clone();
            swapped.auxiliaries.reverse();
            let a = combine_mgcm(&ts, &reg).unwrap().total.values;
            let b = combine_mgcm(&swapped, &reg).unwrap().total.values;
            let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn modularize_commutes_with_sum((lens, vecs) in task_set(2)) {
            let (ts, reg) = build(&lens, &vecs);
            let total = combine_sum(&ts).total.values;
            for m in reg.modules() {
                for i in m.span() {
                    let expected = ts.primary.values[i] + ts.auxiliaries[0].values[i] + ts.auxiliaries[1].values[i];
                    prop_assert_eq!(total[i], expected);
                }
            }
        }
    }
}
