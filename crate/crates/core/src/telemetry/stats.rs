//! Online conflict counters and pooled conflict-probability tables.

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::registry::ModuleRegistry;
use crate::strategies::{ConflictEvent, WHOLE_MODEL};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counter {
    pub steps_observed: u64,
    pub conflicts_observed: u64,
}

impl Counter {
    pub fn probability(&self) -> Option<f64> {
        (self.steps_observed > 0).then(|| self.conflicts_observed as f64 / self.steps_observed as f64)
    }
}

/// Conflict counts per (module, auxiliary).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConflictStats {
    counters: BTreeMap<(i64, usize), Counter>,
    steps: u64,
}

impl ConflictStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds in the events of one optimization step. Each (module, auxiliary)
    /// pair may appear at most once.
    pub fn record_step(&mut self, events: &[ConflictEvent]) -> Result<()> {
        let mut seen = HashSet::with_capacity(events.len());
        for e in events {
            if !seen.insert((e.module_id, e.aux_index)) {
                return Err(Error::DuplicateEvent {
                    step: e.step_index,
                    module: e.module_id,
                    aux: e.aux_index,
                });
            }
        }
        for e in events {
            self.observe(e.module_id, e.aux_index, e.conflict);
        }
        self.steps += 1;
        Ok(())
    }

    pub(crate) fn observe(&mut self, module_id: i64, aux_index: usize, conflict: bool) {
        let c = self.counters.entry((module_id, aux_index)).or_default();
        c.steps_observed += 1;
        c.conflicts_observed += u64::from(conflict);
    }

    pub(crate) fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub fn steps_recorded(&self) -> u64 {
        self.steps
    }

    pub fn counter(&self, module_id: i64, aux_index: usize) -> Option<Counter> {
        self.counters.get(&(module_id, aux_index)).copied()
    }

    /// Conflict frequency, or `None` if the pair was never observed.
    pub fn probability(&self, module_id: i64, aux_index: usize) -> Option<f64> {
        self.counter(module_id, aux_index).and_then(|c| c.probability())
    }

    pub fn iter(&self) -> impl Iterator<Item = ((i64, usize), Counter)> + '_ {
        self.counters.iter().map(|(k, v)| (*k, *v))
    }

    pub fn is_empty(&self) -> bool {
        self.counters.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKey {
    Kind,
    Layer,
    Component,
}

impl GroupKey {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Kind => "kind",
            GroupKey::Layer => "layer",
            GroupKey::Component => "component",
        }
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kind" => Ok(GroupKey::Kind),
            "layer" => Ok(GroupKey::Layer),
            "component" => Ok(GroupKey::Component),
            other => Err(Error::UnknownGroupKey(other.to_string())),
        }
    }
}

/// Parses a comma-separated list of group keys.
pub fn parse_group_keys(s: &str) -> Result<Vec<GroupKey>> {
    s.split(',').map(|k| k.trim().parse()).collect()
}

/// Report-facing attributes of one module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleAttrs {
    /// `Attn`, `FFN`, `LN`, `EMBED`, `OUTPUT_PROJ` or `WHOLE_MODEL`.
    pub family: String,
    /// Global 1-based layer (encoder first, decoder continuing).
    pub layer: Option<usize>,
    pub component: String,
    pub in_taxonomy: bool,
}

impl ModuleAttrs {
    pub fn whole_model() -> Self {
        Self {
            family: "WHOLE_MODEL".into(),
            layer: None,
            component: "-".into(),
            in_taxonomy: false,
        }
    }

    pub fn of(reg: &ModuleRegistry, module_id: i64) -> Option<Self> {
        if module_id == WHOLE_MODEL {
            return Some(Self::whole_model());
        }
        let m = reg.get(usize::try_from(module_id).ok()?)?;
        Some(Self {
            family: m.kind.family().to_string(),
            layer: reg.global_layer(m),
            component: m.component.as_str().to_string(),
            in_taxonomy: m.kind.in_taxonomy(),
        })
    }

    fn key(&self, k: GroupKey) -> String {
        match k {
            GroupKey::Kind => self.family.clone(),
            GroupKey::Layer => self.layer.map_or_else(|| "-".to_string(), |l| l.to_string()),
            GroupKey::Component => self.component.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub keys: Vec<String>,
    pub aux_index: usize,
    pub conflicts: u64,
    pub steps: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictReport {
    pub group_by: Vec<GroupKey>,
    pub rows: Vec<ReportRow>,
}

impl ConflictReport {
    /// CSV with the group keys, auxiliary index, pooled probability and
    /// pooled observation count.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in &self.group_by {
            out.push_str(k.as_str());
            out.push(',');
        }
        out.push_str("aux_index,probability,steps\n");
        for r in &self.rows {
            for k in &r.keys {
                out.push_str(k);
                out.push(',');
            }
            out.push_str(&format!("{},{},{}\n", r.aux_index, r.probability, r.steps));
        }
        out
    }

    pub fn get(&self, keys: &[&str], aux_index: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.aux_index == aux_index && r.keys.iter().map(String::as_str).eq(keys.iter().copied()))
    }
}

/// Pools counters by group: probability = Σ conflicts / Σ observations over
/// the modules of each group.
pub(crate) fn pool<I>(entries: I, group_by: &[GroupKey], taxonomy_only: bool) -> Result<ConflictReport>
where
    I: IntoIterator<Item = (ModuleAttrs, usize, Counter)>,
{
    if group_by.is_empty() {
        return Err(Error::Invalid("at least one group key is required".into()));
    }
    let mut groups: BTreeMap<(Vec<SortKey>, usize), (Vec<String>, Counter)> = BTreeMap::new();
    let mut any = false;
    for (attrs, aux, c) in entries {
        any = true;
        if taxonomy_only && !attrs.in_taxonomy {
            continue;
        }
        let keys: Vec<String> = group_by.iter().map(|k| attrs.key(*k)).collect();
        let sort: Vec<SortKey> = keys.iter().map(|k| SortKey::from(k.as_str())).collect();
        let slot = groups.entry((sort, aux)).or_insert_with(|| (keys, Counter::default()));
        slot.1.steps_observed += c.steps_observed;
        slot.1.conflicts_observed += c.conflicts_observed;
    }
    if !any {
        return Err(Error::Invalid("no conflict statistics recorded".into()));
    }
    let rows = groups
        .into_iter()
        .filter_map(|((_, aux_index), (keys, c))| {
            c.probability().map(|probability| ReportRow {
                keys,
                aux_index,
                conflicts: c.conflicts_observed,
                steps: c.steps_observed,
                probability,
            })
        })
        .collect();
    Ok(ConflictReport {
        group_by: group_by.to_vec(),
        rows,
    })
}

/// Numeric keys sort numerically, so layer 10 follows layer 9.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum SortKey {
    Num(u64),
    Text(String),
}

impl From<&str> for SortKey {
    fn from(s: &str) -> Self {
        s.parse().map_or_else(|_| SortKey::Text(s.to_string()), SortKey::Num)
    }
}

/// Conflict probability pooled by module family, global
/// layer and/or component.
pub fn conflict_probability_report(
    stats: &ConflictStats,
    reg: &ModuleRegistry,
    group_by: &[GroupKey],
    taxonomy_only: bool,
) -> Result<ConflictReport> {
    let mut entries = Vec::new();
    for ((module_id, aux), c) in stats.iter() {
        let attrs = ModuleAttrs::of(reg, module_id)
            .ok_or_else(|| Error::Invalid(format!("module {module_id} is not in the registry")))?;
        entries.push((attrs, aux, c));
    }
    pool(entries, group_by, taxonomy_only)
}
