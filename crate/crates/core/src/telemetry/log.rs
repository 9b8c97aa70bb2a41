//! CSV event and masking logs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::ModuleRegistry;
use crate::strategies::{Action, ConflictEvent};
use crate::telemetry::masking::MaskingRecord;
use crate::telemetry::stats::{self, ConflictReport, ConflictStats, Counter, GroupKey, ModuleAttrs};

/// One line of the event log.
///
/// `kind` is the module kind name (`WHOLE_MODEL` for model-level events) and
/// `layer` the global 1-based layer, −1 outside any layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub step: usize,
    pub module_id: i64,
    pub kind: String,
    pub layer: i64,
    pub component: String,
    pub attention_role: String,
    pub aux_index: usize,
    pub dot: f64,
    pub cosine: f64,
    pub conflict: bool,
    pub action: String,
}

impl EventRow {
    pub fn from_event(e: &ConflictEvent, reg: &ModuleRegistry) -> Result<Self> {
        let (kind, layer, component, role) = if e.module_id < 0 {
            ("WHOLE_MODEL".to_string(), -1, "-".to_string(), "-".to_string())
        } else {
            let m = reg
                .get(e.module_id as usize)
                .ok_or_else(|| Error::Invalid(format!("module {} is not in the registry", e.module_id)))?;
            (
                m.kind.as_str().to_string(),
                reg.global_layer(m).map_or(-1, |l| l as i64),
                m.component.as_str().to_string(),
                m.attention_role.as_str().to_string(),
            )
        };
        Ok(Self {
            step: e.step_index,
            module_id: e.module_id,
            kind,
            layer,
            component,
            attention_role: role,
            aux_index: e.aux_index,
            dot: e.dot,
            cosine: e.cosine,
            conflict: e.conflict,
            action: e.action.as_str().to_string(),
        })
    }

    fn attrs(&self) -> Result<ModuleAttrs> {
        if self.module_id < 0 {
            return Ok(ModuleAttrs::whole_model());
        }
        let kind = crate::registry::ModuleKind::parse(&self.kind)
            .ok_or_else(|| Error::Invalid(format!("unknown module kind `{}` in event log", self.kind)))?;
        Ok(ModuleAttrs {
            family: kind.family().to_string(),
            layer: usize::try_from(self.layer).ok(),
            component: self.component.clone(),
            in_taxonomy: kind.in_taxonomy(),
        })
    }
}

pub struct EventLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> EventLogWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        Ok(Self {
            inner: headed_writer(w, EVENT_LOG_HEADER)?,
        })
    }

    pub fn write_events(&mut self, events: &[ConflictEvent], reg: &ModuleRegistry) -> Result<()> {
        for e in events {
            self.inner.serialize(EventRow::from_event(e, reg)?)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_event_log<R: Read>(r: R) -> Result<Vec<EventRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<EventRow>, _>>()?;
    for row in &rows {
        if Action::parse(&row.action).is_none() {
            return Err(Error::Invalid(format!("unknown action `{}` in event log", row.action)));
        }
    }
    Ok(rows)
}

/// Rebuilds conflict counters from logged rows.
pub fn stats_from_rows(rows: &[EventRow]) -> ConflictStats {
    let mut stats = ConflictStats::new();
    let mut steps = std::collections::BTreeSet::new();
    for r in rows {
        stats.observe(r.module_id, r.aux_index, r.conflict);
        steps.insert(r.step);
    }
    stats.set_steps(steps.len() as u64);
    stats
}

/// Conflict-probability table computed straight from an event log.
pub fn report_from_rows(rows: &[EventRow], group_by: &[GroupKey], taxonomy_only: bool) -> Result<ConflictReport> {
    let mut pooled: std::collections::BTreeMap<(i64, usize), (ModuleAttrs, Counter)> = Default::default();
    for r in rows {
        let attrs = r.attrs()?;
        let slot = pooled
            .entry((r.module_id, r.aux_index))
            .or_insert_with(|| (attrs, Counter::default()));
        slot.1.steps_observed += 1;
        slot.1.conflicts_observed += u64::from(r.conflict);
    }
    stats::pool(
        pooled.into_iter().map(|((_, aux), (a, c))| (a, aux, c)),
        group_by,
        taxonomy_only,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskingRow {
    step: usize,
    aux_index: usize,
    model_dot: f64,
    conflicting_modules: String,
}

pub struct MaskingLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MaskingLogWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        Ok(Self {
            inner: headed_writer(w, MASKING_LOG_HEADER)?,
        })
    }

    pub fn write_records(&mut self, records: &[MaskingRecord]) -> Result<()> {
        for r in records {
            let ids: Vec<String> = r.conflicting_module_ids.iter().map(|i| i.to_string()).collect();
            self.inner.serialize(MaskingRow {
                step: r.step_index,
                aux_index: r.aux_index,
                model_dot: r.model_dot,
                conflicting_modules: ids.join(";"),
            })?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

pub fn read_masking_log<R: Read>(r: R) -> Result<Vec<MaskingRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize::<MaskingRow>() {
        let row = row?;
        let ids = if row.conflicting_modules.is_empty() {
            Vec::new()
        } else {
            row.conflicting_modules
                .split(';')
                .map(|s| s.parse::<usize>().map_err(|e| Error::Invalid(format!("bad module id `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?
        };
        out.push(MaskingRecord {
            step_index: row.step,
            aux_index: row.aux_index,
            model_dot: row.model_dot,
            conflicting_module_ids: ids,
        });
    }
    Ok(out)
}

fn headed_writer<W: Write>(w: W, header: &str) -> Result<csv::Writer<W>> {
    let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    inner.write_record(header.split(','))?;
    Ok(inner)
}

pub const EVENT_LOG_HEADER: &str = "step,module_id,kind,layer,component,attention_role,aux_index,dot,cosine,conflict,action";
pub const MASKING_LOG_HEADER: &str = "step,aux_index,model_dot,conflicting_modules";
