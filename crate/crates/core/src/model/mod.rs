//! Pre-norm encoder-decoder transformer.
//!
//! The encoder attends bidirectionally over the source; the decoder uses
//! causal self-attention plus cross-attention over the encoder output.
//! Positions are learned absolute embeddings. The decoder is fed a PAD
//! start token followed by the target shifted right.

pub mod vocab;

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{io, Mask, Tape, Tensor, Var};
pub use vocab::{Vocab, EOS, NUM_SPECIALS, PAD, UNK};

const LN_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_src: usize,
    pub max_tgt: usize,
    pub seed: u64,
    /// Reuse the token embedding as the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// 6 layers, 512 dims, 8 heads over a 32,128-entry vocabulary.
    pub fn teacher() -> Self {
        ModelConfig {
            layers: 6,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            vocab_size: 32128,
            max_src: 512,
            max_tgt: 256,
            seed: 0,
            tie_embeddings: true,
        }
    }

    /// Student presets by compression factor. ×8 is 3 layers, 128 dims,
    /// 4 heads. ×16 and ×32 keep d_ff = 4·d_model and shrink width (and
    /// depth for ×32) until the non-embedding parameter count drops by
    /// roughly another 2× each step.
    pub fn student(factor: u32) -> Result<Self> {
        let (layers, d_model) = match factor {
            8 => (3, 128),
            16 => (3, 96),
            32 => (2, 64),
            _ => {
                return Err(Error::Config(format!(
                    "no student preset for factor {factor} (expected 8, 16 or 32)"
                )))
            }
        };
        Ok(ModelConfig {
            layers,
            d_model,
            heads: 4,
            d_ff: 4 * d_model,
            tie_embeddings: false,
            ..ModelConfig::teacher()
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.max_src == 0 || self.max_tgt == 0 {
            return fail("max_src and max_tgt must be at least 1".into());
        }
        if self.d_ff == 0 {
            return fail("d_ff must be at least 1".into());
        }
        if self.vocab_size <= EOS {
            return fail(format!("vocab_size {} leaves no room for PAD and EOS", self.vocab_size));
        }
        Ok(())
    }

    /// Parameter names and shapes in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.tokens".into(), vec![v, d]),
            ("encoder.pos".into(), vec![self.max_src, d]),
            ("decoder.pos".into(), vec![self.max_tgt, d]),
        ];
        let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.gain"), vec![d]));
            out.push((format!("{p}.bias"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.{w}"), vec![d, d]));
            }
        };
        let ff = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f]));
            out.push((format!("{p}.b1"), vec![f]));
            out.push((format!("{p}.w2"), vec![f, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for i in 0..self.layers {
            let p = format!("encoder.{i}");
            norm(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.attn"));
            norm(&mut out, &format!("{p}.ln2"));
            ff(&mut out, &format!("{p}.ff"));
        }
        if self.layers > 0 {
            norm(&mut out, "encoder.norm");
        }
        for i in 0..self.layers {
            let p = format!("decoder.{i}");
            norm(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.self"));
            norm(&mut out, &format!("{p}.ln2"));
            attn(&mut out, &format!("{p}.cross"));
            norm(&mut out, &format!("{p}.ln3"));
            ff(&mut out, &format!("{p}.ff"));
        }
        if self.layers > 0 {
            norm(&mut out, "decoder.norm");
        }
        if !self.tie_embeddings {
            out.push(("lm_head.weight".into(), vec![d, v]));
        }
        out
    }
}

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Concatenation of every tensor in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Checks that `other` has the same names, order and shapes.
    pub fn check_compatible(&self, other: &ParameterStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "parameter stores differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b {
                return Err(Error::invalid(format!("parameter name mismatch: {a} vs {b}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Shape {
                    op: "parameter store",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        io::encode(self.iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, self.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = ParameterStore::new();
        for (name, t) in io::read_file(path)? {
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Groups parameters by layer: `encoder.3.attn.q` belongs to `encoder.3`,
/// `embed.tokens` to `embed`.
pub fn layer_group(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    let first = parts.next().unwrap_or("");
    match parts.next() {
        Some(second) if second.chars().all(|c| c.is_ascii_digit()) && !second.is_empty() => {
            &name[..first.len() + 1 + second.len()]
        }
        _ => first,
    }
}

/// Distinct layer groups in parameter order.
pub fn layer_groups(store: &ParameterStore) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for name in store.names() {
        let g = layer_group(name);
        if !out.iter().any(|x| x == g) {
            out.push(g.to_string());
        }
    }
    out
}

/// Seeded initialization: layer-norm gains 1, biases 0, embeddings
/// N(0, 0.02²), projections N(0, 1/d_model).
pub fn init_model(config: &ModelConfig) -> Result<ParameterStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let embed = Normal::new(0.0, EMBED_STD).expect("valid std");
    let proj = Normal::new(0.0, (config.d_model as f64).powf(-0.5)).expect("valid std");
    let mut store = ParameterStore::new();
    for (name, shape) in config.parameter_shapes() {
        let t = if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
            Tensor::zeros(&shape)
        } else if name.starts_with("embed.") || name.ends_with(".pos") {
            Tensor::from_fn(&shape, |_| embed.sample(&mut rng))
        } else {
            Tensor::from_fn(&shape, |_| proj.sample(&mut rng))
        };
        store.insert(name, t);
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub params: usize,
    pub macs_per_token: usize,
    pub flops_per_token: usize,
}

/// Exact parameter count plus a per-token compute estimate.
///
/// MACs count one source token through the encoder and one target token
/// through the decoder and output projection, with attention over full
/// `max_src`/`max_tgt` contexts: per encoder layer `4d² + 2d·d_ff + 2d·S`,
/// per decoder layer `8d² + 2d·d_ff + 2d·T + 2d·S`, plus `d·V` for the
/// output projection. Norms, softmax and biases are ignored. FLOPs = 2·MACs.
pub fn count_params_and_flops(config: &ModelConfig) -> Result<ModelCost> {
    config.validate()?;
    let params = config
        .parameter_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let (d, f, s, t, v) = (
        config.d_model,
        config.d_ff,
        config.max_src,
        config.max_tgt,
        config.vocab_size,
    );
    let enc = 4 * d * d + 2 * d * f + 2 * d * s;
    let dec = 8 * d * d + 2 * d * f + 2 * d * t + 2 * d * s;
    let macs = config.layers * (enc + dec) + d * v;
    Ok(ModelCost {
        params,
        macs_per_token: macs,
        flops_per_token: 2 * macs,
    })
}

/// A padded batch of (source, target) id sequences.
///
/// `tgt_in` is the decoder input (PAD then the target shifted right);
/// `tgt_out` is the prediction target, PAD where there is none.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

impl Batch {
    /// Builds a batch, truncating sources to `max_src` and targets to
    /// `max_tgt` (the final kept position is forced to EOS).
    pub fn new(pairs: &[(&[usize], &[usize])], config: &ModelConfig) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let clip = |ids: &[usize], max: usize| -> Vec<usize> {
            let mut v: Vec<usize> = ids.iter().copied().take(max).collect();
            if ids.len() > max {
                if let Some(last) = v.last_mut() {
                    *last = EOS;
                }
            }
            v
        };
        let srcs: Vec<Vec<usize>> = pairs.iter().map(|(s, _)| clip(s, config.max_src)).collect();
        let tgts: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| clip(t, config.max_tgt)).collect();
        let src_len = srcs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let tgt_len = tgts.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut batch = Batch {
            size: pairs.len(),
            src_len,
            tgt_len,
            src: vec![PAD; pairs.len() * src_len],
            tgt_in: vec![PAD; pairs.len() * tgt_len],
            tgt_out: vec![PAD; pairs.len() * tgt_len],
        };
        for (b, (s, t)) in srcs.iter().zip(&tgts).enumerate() {
            batch.src[b * src_len..b * src_len + s.len()].copy_from_slice(s);
            batch.tgt_out[b * tgt_len..b * tgt_len + t.len()].copy_from_slice(t);
            for (j, &id) in t.iter().take(tgt_len - 1).enumerate() {
                batch.tgt_in[b * tgt_len + j + 1] = id;
            }
        }
        Ok(batch)
    }

    /// Number of non-PAD prediction targets.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// Parameters recorded on a tape, by name.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Records every parameter as a leaf; those for which `trainable`
    /// returns false are constants and receive no gradient.
    pub fn new(tape: &mut Tape, store: &ParameterStore, trainable: &dyn Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn check_ids(ids: &[usize], vocab: usize, what: &str) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab) {
        Some(bad) => Err(Error::invalid(format!(
            "{what} id {bad} out of range for vocab_size {vocab}"
        ))),
        None => Ok(()),
    }
}

struct Ctx<'a> {
    cfg: &'a ModelConfig,
    p: &'a Bound,
}

impl Ctx<'_> {
    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p.get(&format!("{prefix}.gain"))?;
        let b = self.p.get(&format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// `[B, T, d] -> [B·H, T, d_h]`
    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, t: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let x = tape.reshape(x, &[b, t, h, dh])?;
        let x = tape.transpose(x, 1, 2)?;
        tape.reshape(x, &[b * h, t, dh])
    }

    /// Multi-head attention of `x` (`[B, Tq, d]`) over `kv` (`[B, Tk, d]`).
    /// `mask` marks disallowed (query, key) pairs, shape `[Tq, Tk]` or
    /// `[B·H, Tq, Tk]`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        x: Var,
        kv: Var,
        b: usize,
        tq: usize,
        tk: usize,
        mask: Option<&Mask>,
        prefix: &str,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let q = tape.matmul(x, self.p.get(&format!("{prefix}.q"))?)?;
        let k = tape.matmul(kv, self.p.get(&format!("{prefix}.k"))?)?;
        let v = tape.matmul(kv, self.p.get(&format!("{prefix}.v"))?)?;
        let q = self.split_heads(tape, q, b, tq)?;
        let k = self.split_heads(tape, k, b, tk)?;
        let v = self.split_heads(tape, v, b, tk)?;
        let kt = tape.transpose(k, 1, 2)?;
        let scores = tape.batch_matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (self.cfg.head_dim() as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.masked_fill(scores, m, MASKED)?;
        }
        let probs = tape.softmax(scores, 2)?;
        let ctx = tape.batch_matmul(probs, v)?;
        let ctx = tape.reshape(ctx, &[b, self.cfg.heads, tq, self.cfg.head_dim()])?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &[b, tq, d])?;
        tape.matmul(ctx, self.p.get(&format!("{prefix}.o"))?)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = tape.matmul(x, self.p.get(&format!("{prefix}.w1"))?)?;
        let h = tape.add(h, self.p.get(&format!("{prefix}.b1"))?)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, self.p.get(&format!("{prefix}.w2"))?)?;
        tape.add(h, self.p.get(&format!("{prefix}.b2"))?)
    }

    fn embed(&self, tape: &mut Tape, ids: &[usize], b: usize, t: usize, pos: &str) -> Result<Var> {
        let tok = tape.embedding(self.p.get("embed.tokens")?, ids, &[b, t])?;
        let positions: Vec<usize> = (0..t).collect();
        let pe = tape.embedding(self.p.get(pos)?, &positions, &[t])?;
        tape.add(tok, pe)
    }

    fn key_padding_mask(&self, src: &[usize], b: usize, tq: usize, s: usize) -> Result<Mask> {
        let h = self.cfg.heads;
        let mut data = Vec::with_capacity(b * h * tq * s);
        for bi in 0..b {
            let keys = &src[bi * s..(bi + 1) * s];
            for _ in 0..h * tq {
                data.extend(keys.iter().map(|&id| id == PAD));
            }
        }
        Mask::new(vec![b * h, tq, s], data)
    }

    fn encode(&self, tape: &mut Tape, src: &[usize], b: usize, s: usize) -> Result<Var> {
        let mut x = self.embed(tape, src, b, s, "encoder.pos")?;
        let mask = self.key_padding_mask(src, b, s, s)?;
        for i in 0..self.cfg.layers {
            let p = format!("encoder.{i}");
            let h = self.norm(tape, x, &format!("{p}.ln1"))?;
            let a = self.attention(tape, h, h, b, s, s, Some(&mask), &format!("{p}.attn"))?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("{p}.ln2"))?;
            let f = self.feed_forward(tape, h, &format!("{p}.ff"))?;
            x = tape.add(x, f)?;
        }
        if self.cfg.layers > 0 {
            x = self.norm(tape, x, "encoder.norm")?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape,
        enc: Var,
        src: &[usize],
        tgt_in: &[usize],
        b: usize,
        s: usize,
        t: usize,
    ) -> Result<Var> {
        let mut x = self.embed(tape, tgt_in, b, t, "decoder.pos")?;
        let causal = Mask::new(
            vec![t, t],
            (0..t * t).map(|i| i % t > i / t).collect(),
        )?;
        let cross_mask = self.key_padding_mask(src, b, t, s)?;
        for i in 0..self.cfg.layers {
            let p = format!("decoder.{i}");
            let h = self.norm(tape, x, &format!("{p}.ln1"))?;
            let a = self.attention(tape, h, h, b, t, t, Some(&causal), &format!("{p}.self"))?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("{p}.ln2"))?;
            let a = self.attention(tape, h, enc, b, t, s, Some(&cross_mask), &format!("{p}.cross"))?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("{p}.ln3"))?;
            let f = self.feed_forward(tape, h, &format!("{p}.ff"))?;
            x = tape.add(x, f)?;
        }
        if self.cfg.layers > 0 {
            x = self.norm(tape, x, "decoder.norm")?;
        }
        if self.cfg.tie_embeddings {
            let e = self.p.get("embed.tokens")?;
            let et = tape.transpose(e, 0, 1)?;
            let logits = tape.matmul(x, et)?;
            Ok(tape.scale(logits, (self.cfg.d_model as f64).powf(-0.5)))
        } else {
            tape.matmul(x, self.p.get("lm_head.weight")?)
        }
    }
}

/// Records the forward pass; returns logits `[B, T, V]`.
pub fn forward(tape: &mut Tape, params: &Bound, config: &ModelConfig, batch: &Batch) -> Result<Var> {
    if batch.src_len > config.max_src || batch.tgt_len > config.max_tgt {
        return Err(Error::invalid(format!(
            "sequence lengths ({}, {}) exceed limits ({}, {})",
            batch.src_len, batch.tgt_len, config.max_src, config.max_tgt
        )));
    }
    check_ids(&batch.src, config.vocab_size, "source")?;
    check_ids(&batch.tgt_in, config.vocab_size, "target")?;
    let ctx = Ctx { cfg: config, p: params };
    let enc = ctx.encode(tape, &batch.src, batch.size, batch.src_len)?;
    ctx.decode(tape, enc, &batch.src, &batch.tgt_in, batch.size, batch.src_len, batch.tgt_len)
}

/// Forward pass without gradients.
pub fn logits(store: &ParameterStore, config: &ModelConfig, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store, &|_| false);
    let out = forward(&mut tape, &bound, config, batch)?;
    Ok(tape.value(out).clone())
}

/// Argmax decoding until EOS or `max_len` tokens. The returned ids exclude
/// EOS. `max_len` is capped at `max_tgt`.
pub fn greedy_decode(
    store: &ParameterStore,
    config: &ModelConfig,
    src: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    let src: Vec<usize> = if src.len() > config.max_src {
        let mut v = src[..config.max_src].to_vec();
        *v.last_mut().expect("max_src >= 1") = EOS;
        v
    } else if src.is_empty() {
        vec![EOS]
    } else {
        src.to_vec()
    };
    check_ids(&src, config.vocab_size, "source")?;
    let max_len = max_len.min(config.max_tgt);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store, &|_| false);
    let ctx = Ctx { cfg: config, p: &bound };
    let s = src.len();
    let enc = ctx.encode(&mut tape, &src, 1, s)?;
    let mut tgt_in = vec![PAD];
    let mut out = Vec::new();
    while out.len() < max_len {
        let t = tgt_in.len();
        let logits = ctx.decode(&mut tape, enc, &src, &tgt_in, 1, s, t)?;
        let v = config.vocab_size;
        let last = &tape.value(logits).data()[(t - 1) * v..t * v];
        let mut best = 0;
        for (i, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
        tgt_in.push(best);
    }
    Ok(out)
}

/// Parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_model(&config)?;
        Ok(Model { config, params })
    }

    /// Wraps an existing store after checking it matches the configuration.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        let expected = init_model(&ModelConfig { seed: 0, ..config.clone() })?;
        expected.check_compatible(&params).map_err(|e| {
            Error::Checkpoint(format!("checkpoint does not match model config: {e}"))
        })?;
        Ok(Model { config, params })
    }

    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        greedy_decode(&self.params, &self.config, src, max_len)
    }
}
