//! A small post-norm encoder-decoder transformer whose parameters are laid
//! out module by module, so its flat gradient partitions cleanly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::registry::{AttentionRole, Component, ModuleKind, ModuleMeta, ModuleRegistry, RegistryBuilder};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    #[serde(rename = "vocab", alias = "vocab_size")]
    pub vocab_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_model: 64,
            d_ffn: 128,
            vocab_size: 32,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by heads = {}", self.d_model, self.heads),
            ));
        }
        Ok(())
    }

    /// Modules produced by [`ToyTransformer::new`]: eight per encoder layer,
    /// thirteen per decoder layer, plus embedding and output projection.
    pub fn module_count(&self) -> usize {
        8 * self.enc_layers + 13 * self.dec_layers + 2
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: Attention,
    ln1: Norm,
    w1: Linear,
    w2: Linear,
    ln2: Norm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: Norm,
    cross_attn: Attention,
    ln2: Norm,
    w1: Linear,
    w2: Linear,
    ln3: Norm,
}

/// One teacher-forced batch: equal-length source sequences, decoder inputs
/// and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub src: Vec<Vec<usize>>,
    pub dec_in: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ToyTransformer<T> {
    pub config: TransformerConfig,
    pub params: ParamStore<T>,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Linear,
}

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    reg: RegistryBuilder,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn uniform(&mut self, path: String, shape: &[usize], bound: f64) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(self.rng.gen_range(-bound..bound))).collect();
        self.store.add(path, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    fn filled(&mut self, path: String, len: usize, v: f64) -> ParamId {
        self.store.add(path, Tensor::new(vec![len], vec![T::from_f64(v); len]).expect("rank 1"))
    }

    fn linear(&mut self, path: &str, fan_in: usize, fan_out: usize, meta: ModuleMeta) -> Result<Linear> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = self.uniform(format!("{path}.weight"), &[fan_in, fan_out], bound);
        let b = self.filled(format!("{path}.bias"), fan_out, 0.0);
        self.reg.push(meta, &[w, b], self.store)?;
        Ok(Linear { w, b })
    }

    fn norm(&mut self, path: &str, d: usize, layer: i32, component: Component) -> Result<Norm> {
        let gamma = self.filled(format!("{path}.scale"), d, 1.0);
        let beta = self.filled(format!("{path}.shift"), d, 0.0);
        let meta = ModuleMeta {
            kind: ModuleKind::LayerNorm,
            layer_index: layer,
            component,
            attention_role: AttentionRole::None,
        };
        self.reg.push(meta, &[gamma, beta], self.store)?;
        Ok(Norm { gamma, beta })
    }

    fn attention(&mut self, path: &str, d: usize, layer: i32, component: Component, role: AttentionRole) -> Result<Attention> {
        let meta = |kind| ModuleMeta {
            kind,
            layer_index: layer,
            component,
            attention_role: role,
        };
        Ok(Attention {
            q: self.linear(&format!("{path}.q"), d, d, meta(ModuleKind::AttnQ))?,
            k: self.linear(&format!("{path}.k"), d, d, meta(ModuleKind::AttnK))?,
            v: self.linear(&format!("{path}.v"), d, d, meta(ModuleKind::AttnV))?,
            o: self.linear(&format!("{path}.o"), d, d, meta(ModuleKind::AttnO))?,
        })
    }

    fn ffn(&mut self, path: &str, d: usize, f: usize, layer: i32, component: Component) -> Result<(Linear, Linear)> {
        let meta = |kind| ModuleMeta {
            kind,
            layer_index: layer,
            component,
            attention_role: AttentionRole::None,
        };
        let w1 = self.linear(&format!("{path}.w1"), d, f, meta(ModuleKind::FfnW1))?;
        let w2 = self.linear(&format!("{path}.w2"), f, d, meta(ModuleKind::FfnW2))?;
        Ok((w1, w2))
    }
}

impl<T: Scalar> ToyTransformer<T> {
    /// Builds the model and its module registry. Parameter values depend only
    /// on `config` and `seed`.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<(Self, ModuleRegistry)> {
        config.validate()?;
        let TransformerConfig {
            enc_layers,
            dec_layers,
            d_model: d,
            d_ffn: f,
            vocab_size: vocab,
            ..
        } = config;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            reg: RegistryBuilder::new(enc_layers),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let embed = init.uniform("embed.weight".into(), &[vocab, d], (1.0 / d as f64).sqrt());
        init.reg.push(
            ModuleMeta {
                kind: ModuleKind::Embed,
                layer_index: -1,
                component: Component::Shared,
                attention_role: AttentionRole::None,
            },
            &[embed],
            init.store,
        )?;

        let mut encoder = Vec::with_capacity(enc_layers);
        for i in 0..enc_layers {
            let (li, c) = (i as i32, Component::Encoder);
            let p = format!("enc.{i}");
            let attn = init.attention(&format!("{p}.attn"), d, li, c, AttentionRole::SelfAttn)?;
            let ln1 = init.norm(&format!("{p}.ln1"), d, li, c)?;
            let (w1, w2) = init.ffn(&format!("{p}.ffn"), d, f, li, c)?;
            let ln2 = init.norm(&format!("{p}.ln2"), d, li, c)?;
            encoder.push(EncoderLayer { attn, ln1, w1, w2, ln2 });
        }

        let mut decoder = Vec::with_capacity(dec_layers);
        for i in 0..dec_layers {
            let (li, c) = (i as i32, Component::Decoder);
            let p = format!("dec.{i}");
            let self_attn = init.attention(&format!("{p}.self_attn"), d, li, c, AttentionRole::SelfAttn)?;
            let ln1 = init.norm(&format!("{p}.ln1"), d, li, c)?;
            let cross_attn = init.attention(&format!("{p}.cross_attn"), d, li, c, AttentionRole::Cross)?;
            let ln2 = init.norm(&format!("{p}.ln2"), d, li, c)?;
            let (w1, w2) = init.ffn(&format!("{p}.ffn"), d, f, li, c)?;
            let ln3 = init.norm(&format!("{p}.ln3"), d, li, c)?;
            decoder.push(DecoderLayer {
                self_attn,
                ln1,
                cross_attn,
                ln2,
                w1,
                w2,
                ln3,
            });
        }

        let out = init.linear(
            "out_proj",
            d,
            vocab,
            ModuleMeta {
                kind: ModuleKind::OutputProj,
                layer_index: -1,
                component: Component::Decoder,
                attention_role: AttentionRole::None,
            },
        )?;
        let reg = init.reg.finish(&store)?;
        let model = Self {
            config,
            params: store,
            embed,
            encoder,
            decoder,
            out,
        };
        Ok((model, reg))
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, l: Linear) -> Result<Var> {
        let w = tape.param(&self.params, l.w);
        let b = tape.param(&self.params, l.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(&self.params, n.gamma);
        let b = tape.param(&self.params, n.beta);
        tape.layer_norm(x, g, b)
    }

    fn attend(&self, tape: &mut Tape<T>, x: Var, mem: Var, a: &Attention, layout: AttentionLayout) -> Result<Var> {
        let q = self.linear(tape, x, a.q)?;
        let k = self.linear(tape, mem, a.k)?;
        let v = self.linear(tape, mem, a.v)?;
        let ctx = tape.attention(q, k, v, layout)?;
        self.linear(tape, ctx, a.o)
    }

    fn feed_forward(&self, tape: &mut Tape<T>, x: Var, w1: Linear, w2: Linear) -> Result<Var> {
        let h = self.linear(tape, x, w1)?;
        let h = tape.gelu(h);
        self.linear(tape, h, w2)
    }

    fn embed_tokens(&self, tape: &mut Tape<T>, seqs: &[Vec<usize>]) -> Result<(Var, usize)> {
        let len = seqs.first().map(Vec::len).unwrap_or(0);
        if len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Shape {
                op: "embedding_lookup",
                detail: "batch sequences must be non-empty and of equal length".into(),
            });
        }
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let table = tape.param(&self.params, self.embed);
        let x = tape.embedding(table, &ids)?;
        let pos = tape.constant(positional_encoding(seqs.len(), len, self.config.d_model));
        Ok((tape.add(x, pos)?, len))
    }

    /// Records the forward pass and returns the mean token cross-entropy.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &SeqBatch) -> Result<Var> {
        let heads = self.config.heads;
        let (mut mem, src_len) = self.embed_tokens(tape, &batch.src)?;
        let enc_self = AttentionLayout {
            heads,
            q_len: src_len,
            kv_len: src_len,
            causal: false,
        };
        for layer in &self.encoder {
            let a = self.attend(tape, mem, mem, &layer.attn, enc_self)?;
            let r = tape.add(mem, a)?;
            let x = self.norm(tape, r, layer.ln1)?;
            let f = self.feed_forward(tape, x, layer.w1, layer.w2)?;
            let r = tape.add(x, f)?;
            mem = self.norm(tape, r, layer.ln2)?;
        }

        let (mut y, tgt_len) = self.embed_tokens(tape, &batch.dec_in)?;
        let dec_self = AttentionLayout {
            heads,
            q_len: tgt_len,
            kv_len: tgt_len,
            causal: true,
        };
        let cross = AttentionLayout {
            heads,
            q_len: tgt_len,
            kv_len: src_len,
            causal: false,
        };
        for layer in &self.decoder {
            let a = self.attend(tape, y, y, &layer.self_attn, dec_self)?;
            let r = tape.add(y, a)?;
            let x = self.norm(tape, r, layer.ln1)?;
            let c = self.attend(tape, x, mem, &layer.cross_attn, cross)?;
            let r = tape.add(x, c)?;
            let x = self.norm(tape, r, layer.ln2)?;
            let f = self.feed_forward(tape, x, layer.w1, layer.w2)?;
            let r = tape.add(x, f)?;
            y = self.norm(tape, r, layer.ln3)?;
        }
        let logits = self.linear(tape, y, self.out)?;
        let targets: Vec<usize> = batch.targets.iter().flatten().copied().collect();
        tape.cross_entropy(logits, &targets)
    }
}

/// Fixed sinusoidal position table repeated for each sequence of the batch.
fn positional_encoding<T: Scalar>(batch: usize, len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        for pos in 0..len {
            for i in 0..d {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = pos as f64 * rate;
                data.push(T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
            }
        }
    }
    Tensor::new(vec![batch * len, d], data).expect("shape matches")
}
