use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::registry::ModuleRegistry;
use crate::strategies::{cos_sim, detect_conflict, TaskGradientSet};

/// An auxiliary whose whole-model gradient agrees with the primary while at
/// least one of its modules conflicts: the conflict is invisible at model
/// level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingRecord {
    pub step_index: usize,
    pub aux_index: usize,
    pub model_dot: f64,
    pub conflicting_module_ids: Vec<usize>,
}

pub fn detect_masking(ts: &TaskGradientSet, reg: &ModuleRegistry) -> Result<Vec<MaskingRecord>> {
    let primary = reg.modularize(&ts.primary.values)?;
    let mut out = Vec::new();
    for (aux_index, aux) in ts.auxiliaries.iter().enumerate() {
        let model_dot = cos_sim(&ts.primary.values, &aux.values)?.dot;
        if model_dot < 0.0 {
            continue;
        }
        let slices = reg.modularize(&aux.values)?;
        let mut conflicting = Vec::new();
        for ((m, p), a) in reg.modules().iter().zip(&primary).zip(&slices) {
            if detect_conflict(p, a)? {
                conflicting.push(m.module_id);
            }
        }
        if !conflicting.is_empty() {
            out.push(MaskingRecord {
                step_index: ts.step_index,
                aux_index,
                model_dot,
                conflicting_module_ids: conflicting,
            });
        }
    }
    Ok(out)
}
