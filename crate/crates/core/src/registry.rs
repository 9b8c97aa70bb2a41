//! Partition of a model's flat parameter vector into named modules.
//!
//! A module is the smallest parameter group whose gradient can be computed on
//! its own: one layer norm, one feed-forward weight matrix, or one of the
//! query/key/value/output projections of an attention block. Each module
//! covers a contiguous span of the flat gradient layout, and the spans of a
//! registry tile `[0, n)` exactly.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    #[serde(rename = "LN")]
    LayerNorm,
    #[serde(rename = "FFN_W1")]
    FfnW1,
    #[serde(rename = "FFN_W2")]
    FfnW2,
    #[serde(rename = "ATTN_Q")]
    AttnQ,
    #[serde(rename = "ATTN_K")]
    AttnK,
    #[serde(rename = "ATTN_V")]
    AttnV,
    #[serde(rename = "ATTN_O")]
    AttnO,
    #[serde(rename = "EMBED")]
    Embed,
    #[serde(rename = "OUTPUT_PROJ")]
    OutputProj,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 9] = [
        ModuleKind::LayerNorm,
        ModuleKind::FfnW1,
        ModuleKind::FfnW2,
        ModuleKind::AttnQ,
        ModuleKind::AttnK,
        ModuleKind::AttnV,
        ModuleKind::AttnO,
        ModuleKind::Embed,
        ModuleKind::OutputProj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::LayerNorm => "LN",
            ModuleKind::FfnW1 => "FFN_W1",
            ModuleKind::FfnW2 => "FFN_W2",
            ModuleKind::AttnQ => "ATTN_Q",
            ModuleKind::AttnK => "ATTN_K",
            ModuleKind::AttnV => "ATTN_V",
            ModuleKind::AttnO => "ATTN_O",
            ModuleKind::Embed => "EMBED",
            ModuleKind::OutputProj => "OUTPUT_PROJ",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Component family used for pooled reports: `Attn`, `FFN`, `LN`, or the
    /// kind name for the two kinds outside the transformer taxonomy.
    pub fn family(self) -> &'static str {
        match self {
            ModuleKind::AttnQ | ModuleKind::AttnK | ModuleKind::AttnV | ModuleKind::AttnO => "Attn",
            ModuleKind::FfnW1 | ModuleKind::FfnW2 => "FFN",
            ModuleKind::LayerNorm => "LN",
            ModuleKind::Embed => "EMBED",
            ModuleKind::OutputProj => "OUTPUT_PROJ",
        }
    }

    /// False for `EMBED` and `OUTPUT_PROJ`, which exist only so the partition
    /// is total.
    pub fn in_taxonomy(self) -> bool {
        !matches!(self, ModuleKind::Embed | ModuleKind::OutputProj)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Decoder,
    Shared,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "encoder" => Some(Component::Encoder),
            "decoder" => Some(Component::Decoder),
            "shared" => Some(Component::Shared),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionRole {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
    None,
}

impl AttentionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionRole::SelfAttn => "self",
            AttentionRole::Cross => "cross",
            AttentionRole::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "self" => Some(AttentionRole::SelfAttn),
            "cross" => Some(AttentionRole::Cross),
            "none" => Some(AttentionRole::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub module_id: usize,
    pub kind: ModuleKind,
    /// Layer within its stack, or −1 for modules outside any layer.
    pub layer_index: i32,
    pub component: Component,
    pub attention_role: AttentionRole,
    pub param_ids: Vec<ParamId>,
    pub paths: Vec<String>,
    pub span_start: usize,
    pub span_end: usize,
}

impl ModuleDescriptor {
    pub fn span(&self) -> Range<usize> {
        self.span_start..self.span_end
    }

    pub fn len(&self) -> usize {
        self.span_end - self.span_start
    }

    pub fn is_empty(&self) -> bool {
        self.span_end == self.span_start
    }
}

/// Metadata for one module while a model is being assembled.
#[derive(Debug, Clone, Copy)]
pub struct ModuleMeta {
    pub kind: ModuleKind,
    pub layer_index: i32,
    pub component: Component,
    pub attention_role: AttentionRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleRegistry {
    modules: Vec<ModuleDescriptor>,
    total: usize,
    encoder_layers: usize,
}

impl ModuleRegistry {
    /// Registry over anonymous contiguous spans, which must tile `[0, n)`.
    pub fn from_spans(spans: &[Range<usize>]) -> Result<Self> {
        let mut modules = Vec::with_capacity(spans.len());
        let mut cursor = 0;
        for (i, span) in spans.iter().enumerate() {
            if span.start != cursor || span.end < span.start {
                return Err(Error::Invalid(format!(
                    "span {i} {span:?} does not continue the partition at {cursor}"
                )));
            }
            cursor = span.end;
            modules.push(ModuleDescriptor {
                module_id: i,
                kind: ModuleKind::FfnW1,
                layer_index: -1,
                component: Component::Shared,
                attention_role: AttentionRole::None,
                param_ids: Vec::new(),
                paths: vec![format!("module.{i}")],
                span_start: span.start,
                span_end: span.end,
            });
        }
        Ok(Self {
            modules,
            total: cursor,
            encoder_layers: 0,
        })
    }

    /// One module covering the whole vector. Module-level combination over
    /// this registry coincides with model-level combination.
    pub fn whole_model(n: usize) -> Self {
        Self::from_spans(std::slice::from_ref(&(0..n))).expect("single span is a valid partition")
    }

    pub fn modules(&self) -> &[ModuleDescriptor] {
        &self.modules
    }

    pub fn get(&self, module_id: usize) -> Option<&ModuleDescriptor> {
        self.modules.get(module_id)
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Total parameter count `n`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder_layers
    }

    pub fn largest_module(&self) -> usize {
        self.modules.iter().map(ModuleDescriptor::len).max().unwrap_or(0)
    }

    /// 1-based layer number with encoder layers first and decoder layers
    /// continuing the count; `None` for modules outside any layer.
    pub fn global_layer(&self, m: &ModuleDescriptor) -> Option<usize> {
        if m.layer_index < 0 {
            return None;
        }
        let li = m.layer_index as usize;
        Some(match m.component {
            Component::Decoder => self.encoder_layers + li + 1,
            Component::Encoder | Component::Shared => li + 1,
        })
    }

    /// Splits `g` into per-module slices, in module order.
    pub fn modularize<'a>(&self, g: &'a [f64]) -> Result<Vec<&'a [f64]>> {
        if g.len() != self.total {
            return Err(Error::Length {
                op: "modularize",
                expected: self.total,
                actual: g.len(),
            });
        }
        Ok(self.modules.iter().map(|m| &g[m.span()]).collect())
    }

    /// Concatenates per-module slices back into one model-level vector.
    pub fn concat<S: AsRef<[f64]>>(&self, slices: &[S]) -> Result<Vec<f64>> {
        if slices.len() != self.modules.len() {
            return Err(Error::Length {
                op: "concat_model_gradient",
                expected: self.modules.len(),
                actual: slices.len(),
            });
        }
        let mut out = Vec::with_capacity(self.total);
        for (m, s) in self.modules.iter().zip(slices) {
            let s = s.as_ref();
            if s.len() != m.len() {
                return Err(Error::Length {
                    op: "concat_model_gradient",
                    expected: m.len(),
                    actual: s.len(),
                });
            }
            out.extend_from_slice(s);
        }
        Ok(out)
    }

    /// JSON manifest of every module (ids, kinds, spans, parameter paths).
    pub fn manifest_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Entry<'a> {
            module_id: usize,
            kind: ModuleKind,
            layer_index: i32,
            component: Component,
            attention_role: AttentionRole,
            span_start: usize,
            span_end: usize,
            paths: &'a [String],
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            total_params: usize,
            encoder_layers: usize,
            modules: Vec<Entry<'a>>,
        }
        let manifest = Manifest {
            total_params: self.total,
            encoder_layers: self.encoder_layers,
            modules: self
                .modules
                .iter()
                .map(|m| Entry {
                    module_id: m.module_id,
                    kind: m.kind,
                    layer_index: m.layer_index,
                    component: m.component,
                    attention_role: m.attention_role,
                    span_start: m.span_start,
                    span_end: m.span_end,
                    paths: &m.paths,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&manifest)?)
    }
}

/// Assembles a registry while a model allocates its parameters.
#[derive(Debug, Default)]
pub struct RegistryBuilder {
    modules: Vec<ModuleDescriptor>,
    cursor: usize,
    next_param: u32,
    encoder_layers: usize,
}

impl RegistryBuilder {
    pub fn new(encoder_layers: usize) -> Self {
        Self {
            encoder_layers,
            ..Self::default()
        }
    }

    /// Registers a module made of `ids`, which must be the next parameters of
    /// `store` in allocation order.
    pub fn push<T: Scalar>(&mut self, meta: ModuleMeta, ids: &[ParamId], store: &ParamStore<T>) -> Result<()> {
        let mut len = 0;
        let mut paths = Vec::with_capacity(ids.len());
        for id in ids {
            if id.0 != self.next_param {
                return Err(Error::Invalid(format!(
                    "parameter {id} registered out of order (expected p{})",
                    self.next_param
                )));
            }
            self.next_param += 1;
            let p = store.get(*id);
            len += p.value.numel();
            paths.push(p.path.clone());
        }
        self.modules.push(ModuleDescriptor {
            module_id: self.modules.len(),
            kind: meta.kind,
            layer_index: meta.layer_index,
            component: meta.component,
            attention_role: meta.attention_role,
            param_ids: ids.to_vec(),
            paths,
            span_start: self.cursor,
            span_end: self.cursor + len,
        });
        self.cursor += len;
        Ok(())
    }

    pub fn finish<T: Scalar>(self, store: &ParamStore<T>) -> Result<ModuleRegistry> {
        if self.next_param as usize != store.len() || self.cursor != store.numel() {
            return Err(Error::Invalid(format!(
                "registry covers {} of {} parameters",
                self.next_param,
                store.len()
            )));
        }
        Ok(ModuleRegistry {
            modules: self.modules,
            total: self.cursor,
            encoder_layers: self.encoder_layers,
        })
    }
}

/// A flat per-task gradient over all model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub task_label: String,
}

impl GradientVector {
    pub fn new(task_label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            values,
            task_label: task_label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
