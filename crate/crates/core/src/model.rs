//! The full model: streaming encoder, memory selector, and reader, sharing
//! one parameter store.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::clip::{ClipEncoder, MergeLayout};
use crate::error::{Error, Result};
use crate::lm::{Decoding, Depth, LmConfig, MiniLm, PackedSequence, Role};
use crate::mask::AttentionMask;
use crate::nn::Projector;
use crate::params::ParamStore;
use crate::selector::{
    assemble, gumbel_topk, instruction_indicator, selection_from_indices, similarity, SelectionMode,
    SelectionResult, SimilarityMode,
};
use crate::streaming::{MemoryBank, StepOutput, StreamSettings, StreamingEncoder, TimePromptMode};
use crate::tensor::Tensor;
use crate::tokenizer::{vocab_size, TokenId, EOS};

pub const ENCODER_PREFIX: &str = "encoder";
pub const CLIP_PROJECTOR: &str = "clip_projector";
pub const READER_PREFIX: &str = "reader";
pub const READER_PROJECTOR: &str = "reader_projector";

/// Reader LM plus its projector from encoder space `D` to `D_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReaderConfig {
    pub lm: LmConfig,
    /// Hidden width of the projector; defaults to the reader dimension.
    #[serde(default)]
    pub projector_hidden: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Memories handed to the reader, `V`.
    pub top_v: usize,
    pub temperature: f64,
    pub similarity: SimilarityMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Merged feature channels `C`.
    pub feature_channels: usize,
    /// Merged tokens per frame `N`.
    pub tokens_per_frame: usize,
    pub frames_per_clip: usize,
    pub summarization_per_frame: usize,
    pub time_prompts: TimePromptMode,
    pub use_memory: bool,
    pub merge_layout: MergeLayout,
    pub encoder: LmConfig,
    pub reader: ReaderConfig,
    pub selection: SelectionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let lm = |tap| LmConfig {
            vocab_size: vocab_size(),
            model_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 2,
            max_sequence_length: 320,
            tap_layer: tap,
        };
        ModelConfig {
            feature_channels: 32,
            tokens_per_frame: 16,
            frames_per_clip: 8,
            summarization_per_frame: 2,
            time_prompts: TimePromptMode::ClipAndMemory,
            use_memory: true,
            merge_layout: MergeLayout::Consecutive,
            encoder: lm(2),
            reader: ReaderConfig {
                lm: LmConfig { num_layers: 2, ..lm(2) },
                projector_hidden: None,
            },
            selection: SelectionConfig {
                top_v: 4,
                temperature: 0.1,
                similarity: SimilarityMode::Cosine,
            },
        }
    }
}

impl ModelConfig {
    pub fn memory_rows(&self) -> usize {
        self.frames_per_clip * self.summarization_per_frame
    }

    /// Memory tokens the reader receives: `V·T·P`.
    pub fn reader_memory_tokens(&self) -> usize {
        self.selection.top_v * self.memory_rows()
    }

    /// Longest streaming step: prompt, previous memory, features,
    /// summarization tokens, and the global token.
    pub fn encoder_step_len(&self, prompt_len: usize) -> usize {
        let t = self.frames_per_clip;
        let mem = if self.use_memory { self.memory_rows() } else { 0 };
        prompt_len + mem + t * self.tokens_per_frame + self.memory_rows() + 1
    }

    pub fn stream_settings(&self) -> StreamSettings {
        StreamSettings {
            frames_per_clip: self.frames_per_clip,
            summarization_per_frame: self.summarization_per_frame,
            time_prompts: self.time_prompts,
            use_memory: self.use_memory,
            merge_layout: self.merge_layout,
        }
    }

    /// Field checks that need no clip count; `V ≤ K` is checked against
    /// each bank.
    pub fn validate(&self, field: &str) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("{field}.{f}"), m));
        self.encoder.validate(&format!("{field}.encoder"))?;
        self.reader.lm.validate(&format!("{field}.reader.lm"))?;
        if self.frames_per_clip == 0 {
            return err("frames_per_clip", "must be at least 1".into());
        }
        if self.summarization_per_frame == 0 || self.summarization_per_frame >= self.tokens_per_frame {
            return err(
                "summarization_per_frame",
                format!(
                    "P = {} must satisfy 1 <= P < N = {}",
                    self.summarization_per_frame, self.tokens_per_frame
                ),
            );
        }
        if self.feature_channels == 0 {
            return err("feature_channels", "must be at least 1".into());
        }
        if let MergeLayout::Grid2x2 { width } = self.merge_layout {
            if width == 0 || width % 2 != 0 || (4 * self.tokens_per_frame) % (2 * width) != 0 {
                return err("merge_layout", format!("grid width {width} does not tile {} raw tokens", 4 * self.tokens_per_frame));
            }
        }
        if self.selection.top_v == 0 {
            return err("selection.top_v", "must be at least 1".into());
        }
        if !(self.selection.temperature > 0.0) {
            return err("selection.temperature", "must be positive".into());
        }
        if self.encoder.vocab_size != vocab_size() || self.reader.lm.vocab_size != vocab_size() {
            return err("encoder.vocab_size", format!("must equal the tokenizer vocabulary ({})", vocab_size()));
        }
        // The longest prompt is the history-and-clip template with 5-digit times.
        let step = self.encoder_step_len(40);
        if step > self.encoder.max_sequence_length {
            return err(
                "encoder.max_sequence_length",
                format!("{} is shorter than a streaming step ({step})", self.encoder.max_sequence_length),
            );
        }
        let stage1 = self.frames_per_clip * (self.tokens_per_frame + self.summarization_per_frame) + 8;
        if stage1 > self.encoder.max_sequence_length {
            return err(
                "encoder.max_sequence_length",
                format!("{} is shorter than a caption sequence ({stage1})", self.encoder.max_sequence_length),
            );
        }
        let reader = self.reader_memory_tokens() + 16;
        if reader > self.reader.lm.max_sequence_length {
            return err(
                "reader.lm.max_sequence_length",
                format!("{} is shorter than V·T·P plus a question ({reader})", self.reader.lm.max_sequence_length),
            );
        }
        Ok(())
    }

    pub fn check_bank(&self, k: usize) -> Result<()> {
        if self.selection.top_v > k {
            return Err(Error::config(
                "model.selection.top_v",
                format!("V = {} exceeds the number of clips K = {k}", self.selection.top_v),
            ));
        }
        Ok(())
    }
}

/// Which memories reach the reader.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Question-conditioned top-V.
    #[default]
    Learned,
    /// The last V clips, ignoring the question.
    LastV,
}

#[derive(Clone, Debug)]
pub struct Reader {
    pub projector: Projector,
    pub lm: MiniLm,
}

/// Answer tokens with the selection that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub tokens: Vec<TokenId>,
    pub selection: SelectionResult,
    /// Sequence length the reader saw before generating.
    pub reader_input_len: usize,
}

/// Tape handles of a differentiable question pass.
pub struct QuestionPass {
    pub similarities: Var,
    pub selection: SelectionResult,
    pub logits: Var,
    /// Sequence row predicting the first answer token.
    pub answer_row: usize,
}

pub struct StreamModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: StreamingEncoder,
    pub reader: Reader,
    answer_calls: Arc<AtomicUsize>,
}

impl StreamModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate("model")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.encoder.model_dim;
        let dr = config.reader.lm.model_dim;
        let lm = MiniLm::new(&mut store, ENCODER_PREFIX, config.encoder.clone(), &mut rng)?;
        let projector = Projector::new(&mut store, CLIP_PROJECTOR, config.feature_channels, d, d, &mut rng)?;
        let hidden = config.reader.projector_hidden.unwrap_or(dr);
        let reader_projector = Projector::new(&mut store, READER_PROJECTOR, d, hidden, dr, &mut rng)?;
        let reader_lm = MiniLm::new(&mut store, READER_PREFIX, config.reader.lm.clone(), &mut rng)?;
        Ok(StreamModel {
            encoder: StreamingEncoder::new(ClipEncoder { projector, lm }, config.stream_settings()),
            reader: Reader {
                projector: reader_projector,
                lm: reader_lm,
            },
            config,
            store,
            answer_calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Model built from `config` with parameter values from a checkpoint.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut m = StreamModel::new(config, 0)?;
        let saved = ParamStore::load(path)?;
        m.store.load_values_from(&saved)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn answer_calls(&self) -> usize {
        self.answer_calls.load(Ordering::Relaxed)
    }

    pub fn encode(&self, stream: &crate::streaming::VideoStream) -> Result<MemoryBank> {
        self.encoder.encode_video(&self.store, stream)
    }

    fn check_bank_compat(&self, bank: &MemoryBank) -> Result<()> {
        self.config.check_bank(bank.len())?;
        if bank.model_dim != self.config.encoder.model_dim || bank.memory_rows() != self.config.memory_rows() {
            return Err(Error::Checkpoint(format!(
                "bank layout ({} rows x {}) does not match the model ({} x {})",
                bank.memory_rows(),
                bank.model_dim,
                self.config.memory_rows(),
                self.config.encoder.model_dim
            )));
        }
        Ok(())
    }

    /// Selection over a bank at inference.
    pub fn select(&self, tape: &mut Tape, bank: &MemoryBank, question: &[TokenId], strategy: SelectionStrategy) -> Result<SelectionResult> {
        self.check_bank_compat(bank)?;
        let last = tape.constant(bank.last().memory.clone());
        let query = instruction_indicator(tape, &self.store, &self.encoder.clip.lm, last, question)?;
        let indicators = tape.constant(bank.indicators());
        let s = similarity(tape, query, indicators, self.config.selection.similarity)?;
        let sel = &self.config.selection;
        let (mut result, _) = gumbel_topk(tape, s, sel.top_v, sel.temperature, SelectionMode::Inference, 0)?;
        if strategy == SelectionStrategy::LastV {
            let k = bank.len();
            let last: Vec<usize> = (k - sel.top_v..k).collect();
            result.hard = selection_from_indices(k, &last)?;
        }
        Ok(result)
    }

    /// Reader prefix `[project(memories) ∘ question]`.
    fn reader_sequence(&self, tape: &mut Tape, assembled: Var, question: &[TokenId]) -> Result<PackedSequence> {
        let projected = self.reader.projector.forward(tape, &self.store, assembled)?;
        Ok(PackedSequence::new()
            .vectors(Role::Memory, vec![projected])
            .tokens(Role::Text, question.to_vec()))
    }

    /// Selects, assembles, and decodes an answer.
    pub fn answer(&self, bank: &MemoryBank, question: &[TokenId], decoding: &Decoding, strategy: SelectionStrategy) -> Result<Answer> {
        self.answer_calls.fetch_add(1, Ordering::Relaxed);
        let mut tape = Tape::inference();
        let selection = self.select(&mut tape, bank, question, strategy)?;
        // Only the selected entries are placed on the tape.
        let mut memories = Vec::with_capacity(bank.len());
        let placeholder = tape.constant(Tensor::scalar(0.0));
        for (e, &h) in bank.entries.iter().zip(&selection.hard) {
            memories.push(if h { tape.constant(e.memory.clone()) } else { placeholder });
        }
        let assembled = assemble(&mut tape, &memories, &selection.hard, None)?;
        let seq = self.reader_sequence(&mut tape, assembled, question)?;
        let reader_input_len = seq.len(&tape);
        let tokens = self.reader.lm.generate(&mut tape, &self.store, &seq, 4, decoding)?;
        Ok(Answer {
            tokens,
            selection,
            reader_input_len,
        })
    }

    /// Training-time question pass over memories already on `tape`.
    ///
    /// The selection runs in train mode (Gumbel noise from `seed`) unless
    /// `noise` is false; the reader sees `[memories ∘ question ∘ answer]`
    /// and the returned logits cover every row.
    pub fn question_pass(
        &self,
        tape: &mut Tape,
        steps: &[StepOutput],
        question: &[TokenId],
        answer: &[TokenId],
        noise: bool,
        seed: u64,
    ) -> Result<QuestionPass> {
        if steps.is_empty() {
            return Err(Error::invalid("no encoded clips"));
        }
        self.config.check_bank(steps.len())?;
        let last = steps.last().expect("non-empty").memory;
        let query = instruction_indicator(tape, &self.store, &self.encoder.clip.lm, last, question)?;
        let ind: Vec<Var> = steps.iter().map(|s| s.indicator).collect();
        let indicators = if ind.len() == 1 { ind[0] } else { tape.concat_rows(&ind)? };
        let s = similarity(tape, query, indicators, self.config.selection.similarity)?;
        let sel = &self.config.selection;
        let (selection, weights) = gumbel_topk(tape, s, sel.top_v, sel.temperature, SelectionMode::Train { noise }, seed)?;
        let memories: Vec<Var> = steps.iter().map(|s| s.memory).collect();
        let assembled = assemble(tape, &memories, &selection.hard, weights)?;
        let mut text = question.to_vec();
        text.extend_from_slice(answer);
        let seq = self.reader_sequence(tape, assembled, &text)?;
        let len = seq.len(tape);
        let mask = Arc::new(AttentionMask::causal(len)?);
        let out = self.reader.lm.forward(tape, &self.store, &seq, &mask, Depth::Full)?;
        Ok(QuestionPass {
            similarities: s,
            selection,
            logits: out.logits.expect("full depth"),
            answer_row: len - answer.len() - 1,
        })
    }
}

/// Next-token targets for rows `answer_row..`: each answer token, then
/// the end token.
pub fn answer_targets(len: usize, answer_row: usize, answer: &[TokenId]) -> Vec<Option<usize>> {
    let mut t = vec![None; len];
    for (i, &a) in answer.iter().chain(std::iter::once(&EOS)).enumerate() {
        t[answer_row + i] = Some(a);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_sample, SynthConfig};
    use crate::tokenizer::tokenize;

    fn small() -> (StreamModel, SynthConfig) {
        let cfg = SynthConfig {
            num_clips: 6,
            min_events: 1,
            max_events: 2,
            ..SynthConfig::default()
        };
        (StreamModel::new(ModelConfig::default(), 3).unwrap(), cfg)
    }

    #[test]
    fn reader_input_is_vtp_plus_question() {
        let (m, cfg) = small();
        let s = gen_sample(&cfg, 1).unwrap();
        let bank = m.encode(&s.stream).unwrap();
        let q = tokenize("How many distinct symbols appear?").unwrap();
        let a = m.answer(&bank, &q, &Decoding::Greedy, SelectionStrategy::Learned).unwrap();
        assert_eq!(a.reader_input_len, 4 * 8 * 2 + q.len());
        assert_eq!(a.selection.indices().len(), 4);
        let again = m.answer(&bank, &q, &Decoding::Greedy, SelectionStrategy::Learned).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn answering_runs_no_encoder_passes() {
        let (m, cfg) = small();
        let s = gen_sample(&cfg, 2).unwrap();
        let bank = m.encode(&s.stream).unwrap();
        let before = m.encoder.clip_passes();
        for q in &s.qa {
            m.answer(&bank, &q.question, &Decoding::Greedy, SelectionStrategy::Learned).unwrap();
        }
        assert_eq!(m.encoder.clip_passes(), before);
        assert_eq!(m.answer_calls(), s.qa.len());
    }

    #[test]
    fn unselected_entries_are_invisible() {
        let (m, cfg) = small();
        let s = gen_sample(&cfg, 4).unwrap();
        let bank = m.encode(&s.stream).unwrap();
        let q = &s.qa[0].question;
        let a = m.answer(&bank, q, &Decoding::Greedy, SelectionStrategy::Learned).unwrap();
        let mut zeroed = bank.clone();
        for (e, &h) in zeroed.entries.iter_mut().zip(&a.selection.hard) {
            if !h {
                e.memory.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let b = m.answer(&zeroed, q, &Decoding::Greedy, SelectionStrategy::Learned).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.selection.hard, b.selection.hard);
    }

    #[test]
    fn last_v_takes_the_tail() {
        let (m, cfg) = small();
        let s = gen_sample(&cfg, 5).unwrap();
        let bank = m.encode(&s.stream).unwrap();
        let a = m.answer(&bank, &s.qa[0].question, &Decoding::Greedy, SelectionStrategy::LastV).unwrap();
        assert_eq!(a.selection.indices(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn too_few_clips_for_v() {
        let (m, _) = small();
        let cfg = SynthConfig { num_clips: 3, min_events: 1, max_events: 1, ..SynthConfig::default() };
        let s = gen_sample(&cfg, 1).unwrap();
        let bank = m.encode(&s.stream).unwrap();
        let err = m.answer(&bank, &s.qa[0].question, &Decoding::Greedy, SelectionStrategy::Learned);
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn config_rejects_p_not_below_n() {
        let cfg = ModelConfig { summarization_per_frame: 16, ..ModelConfig::default() };
        match cfg.validate("model") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.summarization_per_frame"),
            other => panic!("{other:?}"),
        }
    }
}
