//! Decoder-only transformer with arbitrary binary attention masks and an
//! intermediate-layer tap.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tokenizer::{TokenId, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub max_sequence_length: usize,
    /// 1-based block index whose residual output is exposed.
    pub tap_layer: usize,
}

impl LmConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("{field}.{f}"), m));
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return err(
                "num_heads",
                format!("model_dim {} must be divisible by num_heads {}", self.model_dim, self.num_heads),
            );
        }
        if self.num_layers == 0 {
            return err("num_layers", "must be at least 1".into());
        }
        if self.tap_layer == 0 || self.tap_layer > self.num_layers {
            return err(
                "tap_layer",
                format!("must satisfy 1 <= tap_layer <= num_layers ({})", self.num_layers),
            );
        }
        if self.vocab_size < 2 {
            return err("vocab_size", "must be at least 2".into());
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio", "must be at least 1".into());
        }
        if self.max_sequence_length == 0 {
            return err("max_sequence_length", "must be at least 1".into());
        }
        Ok(())
    }
}

/// What a packed segment stands for in the sequence layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Memory,
    ClipFeatures,
    Summarization,
    Global,
    Text,
}

#[derive(Clone, Debug)]
pub enum SegmentData {
    /// Token ids, embedded by the model.
    Tokens(Vec<TokenId>),
    /// Rows already in model space, injected after the embedding table.
    /// An empty list is an empty segment.
    Vectors(Vec<Var>),
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub role: Role,
    pub data: SegmentData,
}

/// Ordered concatenation of token and vector segments.
#[derive(Clone, Debug, Default)]
pub struct PackedSequence {
    pub segments: Vec<Segment>,
}

impl PackedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(mut self, role: Role, ids: Vec<TokenId>) -> Self {
        self.segments.push(Segment {
            role,
            data: SegmentData::Tokens(ids),
        });
        self
    }

    pub fn vectors(mut self, role: Role, rows: Vec<Var>) -> Self {
        self.segments.push(Segment {
            role,
            data: SegmentData::Vectors(rows),
        });
        self
    }

    fn segment_len(tape: &Tape, seg: &Segment) -> usize {
        match &seg.data {
            SegmentData::Tokens(ids) => ids.len(),
            SegmentData::Vectors(vs) => vs.iter().map(|v| tape.value(*v).rows()).sum(),
        }
    }

    pub fn len(&self, tape: &Tape) -> usize {
        self.segments.iter().map(|s| Self::segment_len(tape, s)).sum()
    }

    pub fn is_empty(&self, tape: &Tape) -> bool {
        self.len(tape) == 0
    }

    /// `(start, len)` of every segment in packed order.
    pub fn spans(&self, tape: &Tape) -> Vec<(Role, usize, usize)> {
        let mut off = 0;
        self.segments
            .iter()
            .map(|s| {
                let n = Self::segment_len(tape, s);
                let span = (s.role, off, n);
                off += n;
                span
            })
            .collect()
    }

    /// Start offset and length of the first segment with `role`.
    pub fn span_of(&self, tape: &Tape, role: Role) -> Option<(usize, usize)> {
        self.spans(tape)
            .into_iter()
            .find(|(r, _, _)| *r == role)
            .map(|(_, s, n)| (s, n))
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
}

/// How far a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    /// Stop after the tap block; no logits.
    Tap,
    /// Run every block and compute logits.
    Full,
}

pub struct LmOutput {
    /// Residual-stream output of block `tap_layer`, `L x D`.
    pub hidden_at_tap: Var,
    /// Residual output of the last block (before the final norm).
    pub final_hidden: Option<Var>,
    /// `L x vocab_size`.
    pub logits: Option<Var>,
}

/// Pre-norm transformer with learned absolute positions.
#[derive(Clone, Debug)]
pub struct MiniLm {
    pub config: LmConfig,
    pub prefix: String,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature { tau: f64, seed: u64 },
    /// Greedy restricted to a closed answer set; emits exactly one token.
    Choice(Vec<TokenId>),
}

impl MiniLm {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate(prefix)?;
        let d = config.model_dim;
        let token_embedding =
            store.add_normal(&format!("{prefix}.tok_emb"), &[config.vocab_size, d], 0.5, rng)?;
        let position_embedding =
            store.add_normal(&format!("{prefix}.pos_emb"), &[config.max_sequence_length, d], 0.1, rng)?;
        let residual_gain = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let n = format!("{prefix}.blocks.{i}");
            let hidden = d * config.mlp_ratio;
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{n}.ln1"), d)?,
                query: Linear::new(store, &format!("{n}.attn.q"), d, d, 1.0, rng)?,
                key: Linear::new(store, &format!("{n}.attn.k"), d, d, 1.0, rng)?,
                value: Linear::new(store, &format!("{n}.attn.v"), d, d, 1.0, rng)?,
                out: Linear::new(store, &format!("{n}.attn.o"), d, d, residual_gain, rng)?,
                ln2: LayerNorm::new(store, &format!("{n}.ln2"), d)?,
                up: Linear::new(store, &format!("{n}.mlp.up"), d, hidden, 1.0, rng)?,
                down: Linear::new(store, &format!("{n}.mlp.down"), hidden, d, residual_gain, rng)?,
            });
        }
        let final_norm = LayerNorm::new(store, &format!("{prefix}.ln_f"), d)?;
        let head = Linear::new(store, &format!("{prefix}.head"), d, config.vocab_size, 1.0, rng)?;
        Ok(MiniLm {
            config,
            prefix: prefix.to_string(),
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            head,
        })
    }

    /// Embeds token segments, passes vector segments through, concatenates
    /// and adds positions.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, seq: &PackedSequence) -> Result<Var> {
        let len = seq.len(tape);
        if len == 0 {
            return Err(Error::invalid("empty packed sequence"));
        }
        if len > self.config.max_sequence_length {
            return Err(Error::invalid(format!(
                "sequence of {len} exceeds max_sequence_length {}",
                self.config.max_sequence_length
            )));
        }
        let table = tape.param(store, self.token_embedding);
        let mut parts = Vec::new();
        for seg in &seq.segments {
            match &seg.data {
                SegmentData::Tokens(ids) if ids.is_empty() => {}
                SegmentData::Tokens(ids) => parts.push(tape.embedding(table, ids)?),
                SegmentData::Vectors(vs) => {
                    for &v in vs {
                        if tape.value(v).cols() != self.config.model_dim {
                            return Err(Error::shape(
                                "embed",
                                format!(
                                    "injected width {} != model_dim {}",
                                    tape.value(v).cols(),
                                    self.config.model_dim
                                ),
                            ));
                        }
                        parts.push(v);
                    }
                }
            }
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let pos_table = tape.param(store, self.position_embedding);
        let pos = tape.slice_rows(pos_table, 0, len)?;
        tape.add(x, pos)
    }

    fn block_forward(
        &self,
        block: &Block,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let a = block.ln1.forward(tape, store, x)?;
        let q = block.query.forward(tape, store, a)?;
        let k = block.key.forward(tape, store, a)?;
        let v = block.value.forward(tape, store, a)?;
        let att = tape.attention(q, k, v, self.config.num_heads, Arc::clone(mask))?;
        let o = block.out.forward(tape, store, att)?;
        let x = tape.add(x, o)?;
        let m = block.ln2.forward(tape, store, x)?;
        let h = block.up.forward(tape, store, m)?;
        let h = tape.gelu(h)?;
        let f = block.down.forward(tape, store, h)?;
        tape.add(x, f)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &PackedSequence,
        mask: &Arc<AttentionMask>,
        depth: Depth,
    ) -> Result<LmOutput> {
        let x = self.embed(tape, store, seq)?;
        self.forward_embedded(tape, store, x, mask, depth)
    }

    /// Runs the blocks on an already embedded `L x D` input.
    pub fn forward_embedded(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &Arc<AttentionMask>,
        depth: Depth,
    ) -> Result<LmOutput> {
        let len = tape.value(x).rows();
        if mask.len() != len {
            return Err(Error::shape(
                "lm forward",
                format!("mask of size {} for sequence of {len}", mask.len()),
            ));
        }
        let mut h = x;
        let mut tap = None;
        let stop = match depth {
            Depth::Tap => self.config.tap_layer,
            Depth::Full => self.config.num_layers,
        };
        for (i, block) in self.blocks.iter().take(stop).enumerate() {
            h = self.block_forward(block, tape, store, h, mask)?;
            if i + 1 == self.config.tap_layer {
                tap = Some(h);
            }
        }
        let hidden_at_tap = tap.expect("tap_layer validated against num_layers");
        if depth == Depth::Tap {
            return Ok(LmOutput {
                hidden_at_tap,
                final_hidden: None,
                logits: None,
            });
        }
        let n = self.final_norm.forward(tape, store, h)?;
        let logits = self.head.forward(tape, store, n)?;
        Ok(LmOutput {
            hidden_at_tap,
            final_hidden: Some(h),
            logits: Some(logits),
        })
    }

    /// Autoregressive continuation of `seq` under the causal mask; stops at
    /// the end token (not emitted) or after `max_new` tokens.
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &PackedSequence,
        max_new: usize,
        decoding: &Decoding,
    ) -> Result<Vec<TokenId>> {
        let mut rng = match decoding {
            Decoding::Temperature { tau, seed } => {
                if !(*tau > 0.0) {
                    return Err(Error::invalid("decoding temperature must be positive"));
                }
                Some(ChaCha8Rng::seed_from_u64(*seed))
            }
            _ => None,
        };
        let mut out = Vec::new();
        let limit = match decoding {
            Decoding::Choice(_) => max_new.min(1),
            _ => max_new,
        };
        while out.len() < limit {
            let s = seq.clone().tokens(Role::Text, out.clone());
            let len = s.len(tape);
            let mask = Arc::new(AttentionMask::causal(len)?);
            let res = self.forward(tape, store, &s, &mask, Depth::Full)?;
            let logits = tape.value(res.logits.expect("full depth"));
            let last = logits.row(len - 1);
            let next = match decoding {
                Decoding::Greedy => argmax(last),
                Decoding::Choice(options) => {
                    if options.is_empty() {
                        return Err(Error::invalid("empty answer choice set"));
                    }
                    *options
                        .iter()
                        .max_by(|a, b| last[**a].total_cmp(&last[**b]).then(b.cmp(a)))
                        .expect("non-empty")
                }
                Decoding::Temperature { tau, .. } => {
                    let m = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = last.iter().map(|v| ((v - m) / tau).exp()).collect();
                    let dist = WeightedIndex::new(&w).map_err(|e| Error::invalid(e.to_string()))?;
                    dist.sample(rng.as_mut().expect("seeded"))
                }
            };
            if next == EOS && !matches!(decoding, Decoding::Choice(_)) {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}
