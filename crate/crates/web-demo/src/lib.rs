//! Browser bindings. Each exported function takes plain numbers or
//! comma-separated strings and returns a JSON document for the page to draw.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mgcm_core::registry::{GradientVector, ModuleRegistry};
use mgcm_core::strategies::{combine, cos_sim, detect_conflict, project, StrategyKind, TaskGradientSet};
use mgcm_core::telemetry::{detect_masking, estimate_extra_memory};

#[derive(Debug, Serialize)]
struct SpanReport {
    module_id: usize,
    start: usize,
    end: usize,
    dot: f64,
    cosine: f64,
    conflict: bool,
}

#[derive(Debug, Serialize)]
struct MaskingReport {
    model_dot: f64,
    model_cosine: f64,
    model_conflict: bool,
    modules: Vec<SpanReport>,
    masked_modules: Vec<usize>,
    verdict: &'static str,
    totals: Vec<(String, Vec<f64>)>,
}

fn parse(label: &str, s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("{label}: `{}` is not a number", t.trim())))
        .collect()
}

/// Per-module and model-level conflict analysis of one primary/auxiliary
/// pair, plus the combined update under every strategy.
pub fn masking_json(primary: &str, aux: &str, boundaries: &str) -> Result<String, String> {
    let p = parse("primary", primary)?;
    let a = parse("auxiliary", aux)?;
    if p.is_empty() || p.len() != a.len() {
        return Err(format!("primary has {} values, auxiliary {}", p.len(), a.len()));
    }
    let mut cuts = vec![0usize];
    for b in parse("boundaries", boundaries)? {
        if b.fract() != 0.0 || b < 0.0 {
            return Err(format!("boundary {b} is not an index"));
        }
        cuts.push(b as usize);
    }
    cuts.push(p.len());
    let spans: Vec<_> = cuts.windows(2).map(|w| w[0]..w[1]).collect();
    let reg = ModuleRegistry::from_spans(&spans).map_err(|e| e.to_string())?;
    let ts = TaskGradientSet::new(GradientVector::new("primary", p.clone()), vec![GradientVector::new("aux", a.clone())], 0)
        .map_err(|e| e.to_string())?;

    let whole = cos_sim(&p, &a).map_err(|e| e.to_string())?;
    let mut modules = Vec::new();
    for m in reg.modules() {
        let s = cos_sim(&p[m.span()], &a[m.span()]).map_err(|e| e.to_string())?;
        modules.push(SpanReport {
            module_id: m.module_id,
            start: m.span_start,
            end: m.span_end,
            dot: s.dot,
            cosine: s.cosine,
            conflict: detect_conflict(&p[m.span()], &a[m.span()]).map_err(|e| e.to_string())?,
        });
    }
    let masked = detect_masking(&ts, &reg).map_err(|e| e.to_string())?;
    let model_conflict = detect_conflict(&p, &a).map_err(|e| e.to_string())?;
    let verdict = if !masked.is_empty() {
        "masked conflict"
    } else if model_conflict {
        "model-level conflict"
    } else {
        "no conflict"
    };
    let mut totals = Vec::new();
    for k in [StrategyKind::Sum, StrategyKind::PcGradModel, StrategyKind::Discard, StrategyKind::Mgcm] {
        let c = combine(k, &ts, &reg).map_err(|e| e.to_string())?;
        totals.push((k.to_string(), c.total.values));
    }
    let report = MaskingReport {
        model_dot: whole.dot,
        model_cosine: whole.cosine,
        model_conflict,
        modules,
        masked_modules: masked.first().map(|r| r.conflicting_module_ids.clone()).unwrap_or_default(),
        verdict,
        totals,
    };
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct Geometry {
    dot: f64,
    cosine: f64,
    angle_deg: f64,
    conflict: bool,
    /// Auxiliary after resolution; unchanged when there is no conflict.
    resolved: [f64; 2],
    sum: [f64; 2],
    combined: [f64; 2],
}

/// Projection of a 2-D auxiliary vector against a 2-D primary vector.
pub fn projection_json(px: f64, py: f64, ax: f64, ay: f64) -> Result<String, String> {
    let (p, a) = ([px, py], [ax, ay]);
    let s = cos_sim(&p, &a).map_err(|e| e.to_string())?;
    let conflict = detect_conflict(&p, &a).map_err(|e| e.to_string())?;
    let resolved = if conflict {
        let r = project(&a, &p).map_err(|e| e.to_string())?.values;
        [r[0], r[1]]
    } else {
        a
    };
    let g = Geometry {
        dot: s.dot,
        cosine: s.cosine,
        angle_deg: s.cosine.clamp(-1.0, 1.0).acos().to_degrees(),
        conflict,
        resolved,
        sum: [px + ax, py + ay],
        combined: [px + resolved[0], py + resolved[1]],
    };
    serde_json::to_string(&g).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct MemoryRow {
    strategy: String,
    extra_gb: f64,
    ratio_vs_pcgrad: f64,
    saving_percent: f64,
}

/// Extra memory of every strategy for `params` parameters.
pub fn memory_json(params: f64, bytes: u32) -> Result<String, String> {
    if !(params.is_finite() && params >= 1.0) {
        return Err(format!("{params} is not a positive parameter count"));
    }
    let rows = [StrategyKind::Sum, StrategyKind::PcGradModel, StrategyKind::Discard, StrategyKind::Mgcm]
        .into_iter()
        .map(|k| {
            let e = estimate_extra_memory(k, params.round() as u64, bytes).map_err(|e| e.to_string())?;
            Ok(MemoryRow {
                strategy: k.to_string(),
                extra_gb: e.extra_gb(),
                ratio_vs_pcgrad: e.ratio_vs_pcgrad,
                saving_percent: e.saving_percent(),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = maskingReport)]
pub fn masking_report(primary: &str, aux: &str, boundaries: &str) -> Result<String, JsValue> {
    masking_json(primary, aux, boundaries).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = projection2d)]
pub fn projection_2d(px: f64, py: f64, ax: f64, ay: f64) -> Result<String, JsValue> {
    projection_json(px, py, ax, ay).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = memoryEstimates)]
pub fn memory_estimates(params: f64, bytes: u32) -> Result<String, JsValue> {
    memory_json(params, bytes).map_err(|e| JsValue::from_str(&e))
}
