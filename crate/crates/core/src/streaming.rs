//! Memory-propagated streaming encoding: clips are encoded one after
//! another, each pass seeing the previous clip's condensed memory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::binio::{Reader, Writer};
use crate::clip::{init_summarization, merge_adjacent_tokens, ClipEncoder, ClipFeatures, MergeLayout, RawFrameFeatures};
use crate::error::{Error, Result};
use crate::lm::{Depth, PackedSequence, Role};
use crate::mask::AttentionMask;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, TokenId};

pub const BANK_MAGIC: &[u8; 4] = b"VSMB";
pub const BANK_VERSION: u8 = 1;

/// Half-open time span in whole seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: u32,
    pub end: u32,
}

impl Span {
    pub fn new(start: u32, end: u32) -> Self {
        Span { start, end }
    }
}

/// A long feature stream: frames of `N₀ x c` raw tokens at `fps`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoStream {
    /// `[frames, N₀, c]`.
    pub frames: Tensor,
    pub fps: u32,
}

impl VideoStream {
    pub fn new(frames: Tensor, fps: u32) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::shape("video stream", format!("expected [frames, N0, c], got {:?}", frames.shape())));
        }
        if fps == 0 {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(VideoStream { frames, fps })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame_len(&self) -> usize {
        self.frames.shape()[1] * self.frames.shape()[2]
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_frames() as f64 / self.fps as f64
    }

    /// First `n` frames.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.num_frames() {
            return Err(Error::invalid(format!("prefix of {n} frames from {}", self.num_frames())));
        }
        let s = self.frames.shape();
        let t = Tensor::new(vec![n, s[1], s[2]], self.frames.data()[..n * self.frame_len()].to_vec())?;
        VideoStream::new(t, self.fps)
    }
}

/// One `T`-frame window of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipWindow {
    /// 1-based clip index.
    pub index: usize,
    pub raw: RawFrameFeatures,
    pub span: Span,
    /// `true` for frames that repeat the last real frame.
    pub padded: Vec<bool>,
}

impl ClipWindow {
    pub fn valid_frames(&self) -> usize {
        self.padded.iter().filter(|p| !**p).count()
    }
}

/// Consecutive non-overlapping `T`-frame clips; a short final clip is
/// right-padded by repeating its last frame.
pub fn segment_video(stream: &VideoStream, frames_per_clip: usize) -> Result<Vec<ClipWindow>> {
    if frames_per_clip == 0 {
        return Err(Error::invalid("frames per clip must be positive"));
    }
    let total = stream.num_frames();
    let (n0, c) = (stream.frames.shape()[1], stream.frames.shape()[2]);
    let fl = stream.frame_len();
    let data = stream.frames.data();
    let k = total.div_ceil(frames_per_clip);
    let mut clips = Vec::with_capacity(k);
    for i in 0..k {
        let start = i * frames_per_clip;
        let mut buf = Vec::with_capacity(frames_per_clip * fl);
        let mut padded = Vec::with_capacity(frames_per_clip);
        for f in start..start + frames_per_clip {
            let src = f.min(total - 1);
            buf.extend_from_slice(&data[src * fl..(src + 1) * fl]);
            padded.push(f >= total);
        }
        let secs = |frame: usize| (frame / stream.fps as usize) as u32;
        clips.push(ClipWindow {
            index: i + 1,
            raw: RawFrameFeatures::new(Tensor::new(vec![frames_per_clip, n0, c], buf)?)?,
            span: Span::new(secs(start), secs(start + frames_per_clip)),
            padded,
        });
    }
    Ok(clips)
}

/// Which timestamps the streaming prompt mentions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimePromptMode {
    None,
    Clip,
    Memory,
    #[default]
    ClipAndMemory,
}

/// Prompt text for a step; `history` is the span covered by the injected
/// memory (absent for the first clip).
pub fn time_prompt_text(history: Option<Span>, clip: Span, mode: TimePromptMode) -> Option<String> {
    let clip_only = || format!("This clip is sampled in {} to {} seconds.", clip.start, clip.end);
    match (mode, history) {
        (TimePromptMode::None, _) => None,
        (TimePromptMode::Clip, _) | (TimePromptMode::ClipAndMemory, None) => Some(clip_only()),
        (TimePromptMode::Memory, None) => None,
        (TimePromptMode::Memory, Some(h)) => {
            Some(format!("This contains a history of {} to {} seconds.", h.start, h.end))
        }
        (TimePromptMode::ClipAndMemory, Some(h)) => Some(format!(
            "This contains a history of {} to {} seconds, and a clip sampled in {} to {} seconds.",
            h.start, h.end, clip.start, clip.end
        )),
    }
}

/// Tokenized time prompt using the history-and-clip template, or the
/// clip-only template when there is no history.
pub fn format_time_prompt(history: Option<Span>, clip: Span) -> Result<Vec<TokenId>> {
    format_time_prompt_mode(history, clip, TimePromptMode::ClipAndMemory)
}

pub fn format_time_prompt_mode(history: Option<Span>, clip: Span, mode: TimePromptMode) -> Result<Vec<TokenId>> {
    if let Some(h) = history {
        if h.end < h.start {
            return Err(Error::invalid("history span ends before it starts"));
        }
    }
    if clip.end < clip.start {
        return Err(Error::invalid("clip span ends before it starts"));
    }
    match time_prompt_text(history, clip, mode) {
        Some(text) => tokenize(&text),
        None => Ok(Vec::new()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSettings {
    /// Frames per clip `T`.
    pub frames_per_clip: usize,
    /// Summarization tokens per frame `P`.
    pub summarization_per_frame: usize,
    pub time_prompts: TimePromptMode,
    /// Inject `H_{k-1}` into step `k`.
    pub use_memory: bool,
    pub merge_layout: MergeLayout,
}

/// Per-clip inputs that do not depend on parameters, computed once.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub index: usize,
    pub span: Span,
    /// `F ∘ S ∘ Ŝ` in feature space, `(T·N + T·P + 1) x C`.
    pub feature_rows: Tensor,
    pub feature_tokens: usize,
    pub summary_tokens: usize,
}

/// Merges tokens and initializes summarization/global tokens for each clip.
pub fn prepare_clips(clips: &[ClipWindow], settings: &StreamSettings) -> Result<Vec<PreparedClip>> {
    clips
        .iter()
        .map(|w| {
            let f = merge_adjacent_tokens(&w.raw, settings.merge_layout)?;
            prepare_features(w.index, w.span, &f, w.valid_frames(), settings.summarization_per_frame)
        })
        .collect()
}

pub fn prepare_features(index: usize, span: Span, f: &ClipFeatures, valid: usize, p: usize) -> Result<PreparedClip> {
    let s = init_summarization(f, p, valid)?;
    let fm = f.as_matrix();
    let rows = Tensor::concat_rows(&[&fm, &s.tokens, &s.global])?;
    Ok(PreparedClip {
        index,
        span,
        feature_rows: rows,
        feature_tokens: fm.rows(),
        summary_tokens: s.tokens.rows(),
    })
}

/// Tape handles of one encoding step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Condensed memory `H_k`, `(T·P) x D`.
    pub memory: Var,
    /// Clip indicator `Ĥ_k`, `1 x D`.
    pub indicator: Var,
    pub sequence_len: usize,
}

/// The streaming encoder: clip projector, encoder LM, and layout settings.
#[derive(Clone, Debug)]
pub struct StreamingEncoder {
    pub clip: ClipEncoder,
    pub settings: StreamSettings,
    clip_passes: Arc<AtomicUsize>,
}

impl StreamingEncoder {
    pub fn new(clip: ClipEncoder, settings: StreamSettings) -> Self {
        StreamingEncoder {
            clip,
            settings,
            clip_passes: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Number of encoder passes over clip features since construction.
    pub fn clip_passes(&self) -> usize {
        self.clip_passes.load(Ordering::Relaxed)
    }

    pub fn model_dim(&self) -> usize {
        self.clip.lm.config.model_dim
    }

    pub fn memory_rows(&self) -> usize {
        self.settings.frames_per_clip * self.settings.summarization_per_frame
    }

    /// One step: packs `[prompt ∘ H_{k-1} ∘ F_k ∘ S_k ∘ Ŝ_k]` under the
    /// causal mask and reads `H_k` from the summarization span and `Ĥ_k`
    /// from the global position, both at the tap layer.
    pub fn encode_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prev: Option<Var>,
        clip: &PreparedClip,
        history: Option<Span>,
    ) -> Result<StepOutput> {
        self.clip_passes.fetch_add(1, Ordering::Relaxed);
        let d = self.model_dim();
        let (prev, history) = if self.settings.use_memory { (prev, history) } else { (None, None) };
        if let Some(p) = prev {
            let s = tape.value(p).shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::shape("encode_step", format!("previous memory {s:?} vs model dim {d}")));
            }
        }
        let prompt = format_time_prompt_mode(history, clip.span, self.settings.time_prompts)?;
        let projected = self.clip.project(tape, store, clip.feature_rows.clone())?;
        let seq = PackedSequence::new()
            .tokens(Role::Prompt, prompt)
            .vectors(Role::Memory, prev.into_iter().collect())
            .vectors(Role::ClipFeatures, vec![projected]);
        let len = seq.len(tape);
        let mask = Arc::new(AttentionMask::causal(len)?);
        let out = self.clip.lm.forward(tape, store, &seq, &mask, Depth::Tap)?;
        let summary_start = len - 1 - clip.summary_tokens;
        let memory = tape.slice_rows(out.hidden_at_tap, summary_start, clip.summary_tokens)?;
        let indicator = tape.slice_rows(out.hidden_at_tap, len - 1, 1)?;
        Ok(StepOutput {
            memory,
            indicator,
            sequence_len: len,
        })
    }

    /// Encodes every clip on one tape (for training through the whole
    /// memory chain).
    pub fn encode_on_tape(&self, tape: &mut Tape, store: &ParamStore, clips: &[PreparedClip]) -> Result<Vec<StepOutput>> {
        let mut outs: Vec<StepOutput> = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let prev = outs.last().map(|o| o.memory);
            let history = (i > 0).then(|| Span::new(clips[0].span.start, clip.span.start));
            outs.push(self.encode_step(tape, store, prev, clip, history)?);
        }
        Ok(outs)
    }

    /// Inference encoding; each step runs on a fresh tape so live state is
    /// one step plus the bank.
    pub fn encode_prepared(&self, store: &ParamStore, clips: &[PreparedClip]) -> Result<MemoryBank> {
        if clips.is_empty() {
            return Err(Error::invalid("cannot encode an empty stream"));
        }
        let mut entries: Vec<MemoryEntry> = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let mut tape = Tape::inference();
            let prev = entries.last().map(|e| tape.constant(e.memory.clone()));
            let history = (i > 0).then(|| Span::new(clips[0].span.start, clip.span.start));
            let out = self.encode_step(&mut tape, store, prev, clip, history)?;
            entries.push(MemoryEntry {
                index: clip.index,
                span: clip.span,
                memory: tape.value(out.memory).clone(),
                indicator: tape.value(out.indicator).clone(),
            });
        }
        Ok(MemoryBank {
            entries,
            frames_per_clip: self.settings.frames_per_clip,
            summarization_per_frame: self.settings.summarization_per_frame,
            model_dim: self.model_dim(),
            fingerprint: self.fingerprint(store),
        })
    }

    pub fn encode_video(&self, store: &ParamStore, stream: &VideoStream) -> Result<MemoryBank> {
        let clips = segment_video(stream, self.settings.frames_per_clip)?;
        let prepared = prepare_clips(&clips, &self.settings)?;
        self.encode_prepared(store, &prepared)
    }

    /// FNV-1a hash of the settings and every encoder parameter.
    pub fn fingerprint(&self, store: &ParamStore) -> u64 {
        let mut h = Fnv::new();
        h.write(format!("{:?}", self.settings).as_bytes());
        let prefixes = [self.clip.lm.prefix.as_str(), "clip_projector"];
        for id in store.ids() {
            let name = store.name(id);
            if prefixes.iter().any(|p| name.starts_with(p)) {
                h.write(name.as_bytes());
                for v in store.value(id).data() {
                    h.write(&v.to_bits().to_le_bytes());
                }
            }
        }
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Condensed memory and clip indicator of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    /// 1-based clip index `k`.
    pub index: usize,
    pub span: Span,
    /// `H_k`, `(T·P) x D`.
    pub memory: Tensor,
    /// `Ĥ_k`, `1 x D`.
    pub indicator: Tensor,
}

/// All memories of one stream, ordered by clip index.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub entries: Vec<MemoryEntry>,
    pub frames_per_clip: usize,
    pub summarization_per_frame: usize,
    pub model_dim: usize,
    pub fingerprint: u64,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn memory_rows(&self) -> usize {
        self.frames_per_clip * self.summarization_per_frame
    }

    pub fn last(&self) -> &MemoryEntry {
        self.entries.last().expect("bank is non-empty")
    }

    /// `K x D` stack of clip indicators.
    pub fn indicators(&self) -> Tensor {
        let rows: Vec<&Tensor> = self.entries.iter().map(|e| &e.indicator).collect();
        Tensor::concat_rows(&rows).expect("indicators share width")
    }

    /// Bitwise equality of every stored value.
    pub fn bit_eq(&self, other: &MemoryBank) -> bool {
        self.frames_per_clip == other.frames_per_clip
            && self.summarization_per_frame == other.summarization_per_frame
            && self.model_dim == other.model_dim
            && self.fingerprint == other.fingerprint
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.index == b.index && a.span == b.span && a.memory.bit_eq(&b.memory) && a.indicator.bit_eq(&b.indicator)
            })
    }

    /// `VSMB` layout: magic, version, then K, T, P, D and the encoder
    /// fingerprint (u64 each); per entry the clip index, span start and
    /// end (u64 each), `H_k` values then `Ĥ_k` values (f64), little-endian.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = Writer::new(w);
        out.header(BANK_MAGIC, BANK_VERSION)?;
        for v in [
            self.entries.len(),
            self.frames_per_clip,
            self.summarization_per_frame,
            self.model_dim,
        ] {
            out.u64(v as u64)?;
        }
        out.u64(self.fingerprint)?;
        for e in &self.entries {
            out.u64(e.index as u64)?;
            out.u64(e.span.start as u64)?;
            out.u64(e.span.end as u64)?;
            out.f64s(e.memory.data())?;
            out.f64s(e.indicator.data())?;
        }
        out.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut input = Reader::new(r, "memory bank");
        input.header(BANK_MAGIC, BANK_VERSION)?;
        let k = input.count(1 << 20)?;
        let t = input.count(1 << 16)?;
        let p = input.count(1 << 16)?;
        let d = input.count(1 << 20)?;
        let fingerprint = input.u64()?;
        if k == 0 || t == 0 || p == 0 || d == 0 {
            return Err(Error::Checkpoint("memory bank: zero-sized header field".into()));
        }
        let rows = t * p;
        let mut entries = Vec::with_capacity(k);
        for _ in 0..k {
            let index = input.count(1 << 20)?;
            let start = input.count(u32::MAX as u64)? as u32;
            let end = input.count(u32::MAX as u64)? as u32;
            let memory = Tensor::new(vec![rows, d], input.f64s(rows * d)?)?;
            let indicator = Tensor::new(vec![1, d], input.f64s(d)?)?;
            entries.push(MemoryEntry {
                index,
                span: Span::new(start, end),
                memory,
                indicator,
            });
        }
        input.expect_eof()?;
        if entries.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(Error::Checkpoint("memory bank: entries out of order".into()));
        }
        Ok(MemoryBank {
            entries,
            frames_per_clip: t,
            summarization_per_frame: p,
            model_dim: d,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::detokenize;

    fn stream(frames: usize) -> VideoStream {
        let data = (0..frames * 8).map(|i| i as f64).collect();
        VideoStream::new(Tensor::new(vec![frames, 4, 2], data).unwrap(), 1).unwrap()
    }

    #[test]
    fn segmentation_spans() {
        let clips = segment_video(&stream(160), 16).unwrap();
        assert_eq!(clips.len(), 10);
        assert_eq!(clips[0].span, Span::new(0, 16));
        assert_eq!(clips[1].span, Span::new(16, 32));
        assert_eq!(clips[9].span, Span::new(144, 160));
        let one = segment_video(&stream(16), 16).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].span, Span::new(0, 16));
        assert!(segment_video(&stream(16), 0).is_err());
    }

    #[test]
    fn partial_clip_is_padded_with_last_frame() {
        let s = stream(17);
        let clips = segment_video(&s, 16).unwrap();
        assert_eq!(clips.len(), 2);
        let second = &clips[1];
        assert_eq!(second.valid_frames(), 1);
        assert_eq!(second.padded.iter().filter(|p| **p).count(), 15);
        let last = &s.frames.data()[16 * 8..17 * 8];
        for f in 0..16 {
            assert_eq!(&second.raw.0.data()[f * 8..(f + 1) * 8], last);
        }
    }

    #[test]
    fn prompt_templates() {
        let toks = format_time_prompt(Some(Span::new(0, 16)), Span::new(16, 32)).unwrap();
        assert_eq!(
            detokenize(&toks).unwrap(),
            "This contains a history of 0 to 16 seconds, and a clip sampled in 16 to 32 seconds."
        );
        let first = format_time_prompt(None, Span::new(0, 16)).unwrap();
        assert_eq!(detokenize(&first).unwrap(), "This clip is sampled in 0 to 16 seconds.");
        let mem = format_time_prompt_mode(Some(Span::new(0, 8)), Span::new(8, 16), TimePromptMode::Memory).unwrap();
        assert_eq!(detokenize(&mem).unwrap(), "This contains a history of 0 to 8 seconds.");
        assert!(format_time_prompt_mode(None, Span::new(0, 8), TimePromptMode::None).unwrap().is_empty());
        assert!(format_time_prompt(None, Span::new(8, 0)).is_err());
    }
}
