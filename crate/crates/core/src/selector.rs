//! Question-conditioned memory selection.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{Depth, MiniLm, PackedSequence, Role};
use crate::mask::AttentionMask;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    #[default]
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// Gumbel-perturbed top-V with straight-through soft weights. `noise`
    /// can be switched off for limit checks.
    Train { noise: bool },
    /// Noiseless top-V of the raw similarities.
    Inference,
}

/// Outcome of one selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub similarities: Vec<f64>,
    /// Scores the hard choice was made on (`s/τ + g` in training, `s` at
    /// inference).
    pub scores: Vec<f64>,
    /// Multi-hot index with exactly `V` ones.
    pub hard: Vec<bool>,
    /// Softmax relaxation of the scores.
    pub soft: Vec<f64>,
    pub temperature: f64,
    pub seed: u64,
}

impl SelectionResult {
    /// Selected 0-based clip positions in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.hard
            .iter()
            .enumerate()
            .filter(|(_, h)| **h)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Indices of the `v` largest scores; ties go to the earlier index.
/// Returned in ascending index order.
pub fn top_v(scores: &[f64], v: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(v).collect();
    chosen.sort_unstable();
    chosen
}

/// Final-position tap state of `[H_K ∘ question]` under the causal mask.
pub fn instruction_indicator(
    tape: &mut Tape,
    store: &ParamStore,
    lm: &MiniLm,
    last_memory: Var,
    question: &[TokenId],
) -> Result<Var> {
    if question.is_empty() {
        return Err(Error::invalid("empty question"));
    }
    let seq = PackedSequence::new()
        .vectors(Role::Memory, vec![last_memory])
        .tokens(Role::Text, question.to_vec());
    let len = seq.len(tape);
    let mask = Arc::new(AttentionMask::causal(len)?);
    let out = lm.forward(tape, store, &seq, &mask, Depth::Tap)?;
    tape.slice_rows(out.hidden_at_tap, len - 1, 1)
}

/// Similarity of the instruction indicator to each clip indicator, as a
/// length-`K` vector.
pub fn similarity(tape: &mut Tape, query: Var, indicators: Var, mode: SimilarityMode) -> Result<Var> {
    match mode {
        SimilarityMode::Cosine => tape.cosine(query, indicators),
        SimilarityMode::Dot => {
            let k = tape.value(indicators).rows();
            let s = tape.matmul_ext(query, indicators, true)?;
            tape.reshape(s, vec![k])
        }
    }
}

/// Gumbel-TopK over similarities `s` (a length-`K` tape value).
///
/// Returns the selection and, in train mode, a length-`K` tape value whose
/// forward values are the hard 0/1 index and whose gradient flows into the
/// softmax relaxation of the perturbed scores.
pub fn gumbel_topk(
    tape: &mut Tape,
    s: Var,
    v: usize,
    temperature: f64,
    mode: SelectionMode,
    seed: u64,
) -> Result<(SelectionResult, Option<Var>)> {
    let sims = tape.value(s).data().to_vec();
    let k = sims.len();
    if v == 0 || v > k {
        return Err(Error::invalid(format!("V = {v} must satisfy 1 <= V <= K = {k}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("selection temperature must be positive"));
    }
    match mode {
        SelectionMode::Inference => {
            let chosen = top_v(&sims, v);
            let mut soft: Vec<f64> = sims.iter().map(|x| x / temperature).collect();
            softmax_in_place(&mut soft);
            Ok((
                SelectionResult {
                    hard: mask_of(k, &chosen),
                    scores: sims.clone(),
                    similarities: sims,
                    soft,
                    temperature,
                    seed,
                },
                None,
            ))
        }
        SelectionMode::Train { noise } => {
            let g: Vec<f64> = if noise {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
                (0..k).map(|_| dist.sample(&mut rng)).collect()
            } else {
                vec![0.0; k]
            };
            let scaled = tape.scale(s, 1.0 / temperature)?;
            let noise_v = tape.constant(Tensor::new(vec![k], g)?);
            let z = tape.add(scaled, noise_v)?;
            let scores = tape.value(z).data().to_vec();
            let zr = tape.reshape(z, vec![1, k])?;
            let soft_v = tape.softmax(zr)?;
            let soft = tape.value(soft_v).data().to_vec();
            let chosen = top_v(&scores, v);
            let hard = mask_of(k, &chosen);
            let hard_t = Tensor::new(vec![1, k], hard.iter().map(|&h| h as u8 as f64).collect())?;
            let st = tape.straight_through(soft_v, hard_t)?;
            let st = tape.reshape(st, vec![k])?;
            Ok((
                SelectionResult {
                    similarities: sims,
                    scores,
                    hard,
                    soft,
                    temperature,
                    seed,
                },
                Some(st),
            ))
        }
    }
}

fn mask_of(k: usize, chosen: &[usize]) -> Vec<bool> {
    let mut m = vec![false; k];
    for &c in chosen {
        m[c] = true;
    }
    m
}

/// Concatenates the selected memories in ascending clip order. With
/// `weights`, each block is multiplied by its straight-through weight so
/// gradients reach the similarities.
pub fn assemble(tape: &mut Tape, memories: &[Var], hard: &[bool], weights: Option<Var>) -> Result<Var> {
    if hard.len() != memories.len() {
        return Err(Error::invalid(format!(
            "selection over {} clips for a bank of {}",
            hard.len(),
            memories.len()
        )));
    }
    let mut parts = Vec::new();
    for (i, (&m, &h)) in memories.iter().zip(hard).enumerate() {
        if !h {
            continue;
        }
        parts.push(match weights {
            Some(w) => tape.scale_by_element(m, w, i)?,
            None => m,
        });
    }
    if parts.is_empty() {
        return Err(Error::invalid("empty selection"));
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat_rows(&parts)
}

/// Selection by explicit clip positions (0-based), validated against the
/// bank size.
pub fn selection_from_indices(k: usize, indices: &[usize]) -> Result<Vec<bool>> {
    if let Some(bad) = indices.iter().find(|&&i| i >= k) {
        return Err(Error::invalid(format!("clip index {bad} outside a bank of {k}")));
    }
    Ok(mask_of(k, indices))
}

/// Uniform distribution over the 1-based ground-truth clips.
pub fn grounding_target(k: usize, gt_clips: &[usize]) -> Result<Tensor> {
    if gt_clips.is_empty() {
        return Err(Error::invalid("empty grounding set"));
    }
    let mut t = vec![0.0; k];
    for &c in gt_clips {
        if c == 0 || c > k {
            return Err(Error::invalid(format!("grounding clip {c} outside 1..={k}")));
        }
        t[c - 1] = 1.0;
    }
    let n = t.iter().sum::<f64>();
    t.iter_mut().for_each(|v| *v /= n);
    Tensor::new(vec![1, k], t)
}

/// `KL(uniform(gt) ‖ softmax(s/τ))`.
pub fn selection_kl_loss(tape: &mut Tape, s: Var, gt_clips: &[usize], temperature: f64) -> Result<Var> {
    let k = tape.value(s).len();
    let target = grounding_target(k, gt_clips)?;
    let scaled = tape.scale(s, 1.0 / temperature)?;
    let row = tape.reshape(scaled, vec![1, k])?;
    let pred = tape.softmax(row)?;
    tape.kl_divergence(pred, &target)
}
