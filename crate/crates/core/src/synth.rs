//! Seeded generator of long feature streams with planted, time-localized
//! symbol events and QA pairs that carry ground-truth grounding.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{read_tensors_with_magic, write_tensors_with_magic};
use crate::streaming::{Span, VideoStream};
use crate::tensor::Tensor;
use crate::tokenizer::{bucket_token, digit_token, symbol_token, tokenize, TokenId, MAX_BUCKETS, MAX_SYMBOLS};

pub const DATASET_MAGIC: &[u8; 4] = b"VSDS";
/// Seed of the fixed symbol direction set.
pub const DIRECTION_SEED: u64 = 0x5eed_d1ec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    /// Raw tokens per frame `N₀` (merged to `N₀/4`).
    pub raw_tokens: usize,
    /// Raw channels `c` (merged to `4c`).
    pub raw_channels: usize,
    pub fps: u32,
    pub alphabet: usize,
    pub intensity: f64,
    pub noise: f64,
    /// Consecutive clips covered by one event.
    pub event_clips: usize,
    pub min_events: usize,
    pub max_events: usize,
    /// Number of time buckets for when-questions.
    pub time_buckets: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_clips: 16,
            frames_per_clip: 8,
            raw_tokens: 64,
            raw_channels: 8,
            fps: 1,
            alphabet: 10,
            intensity: 1.0,
            noise: 0.5,
            event_clips: 2,
            min_events: 2,
            max_events: 4,
            time_buckets: 4,
        }
    }
}

impl SynthConfig {
    pub fn merged_channels(&self) -> usize {
        4 * self.raw_channels
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::config(format!("{field}.{f}"), m));
        if self.raw_tokens == 0 || self.raw_tokens % 4 != 0 {
            return bad("raw_tokens", format!("{} must be a positive multiple of 4", self.raw_tokens));
        }
        if self.alphabet == 0 || self.alphabet > MAX_SYMBOLS || self.alphabet > self.merged_channels() {
            return bad(
                "alphabet",
                format!("must be in 1..={} and at most 4 * raw_channels", MAX_SYMBOLS),
            );
        }
        if self.num_clips == 0 || self.frames_per_clip == 0 || self.fps == 0 {
            return bad("num_clips", "clip counts and fps must be positive".into());
        }
        if self.event_clips == 0 || self.min_events == 0 || self.min_events > self.max_events {
            return bad("min_events", "need 1 <= min_events <= max_events and event_clips >= 1".into());
        }
        if self.max_events * (self.event_clips + 1) > self.num_clips + 1 {
            return bad("max_events", format!("{} events do not fit in {} clips", self.max_events, self.num_clips));
        }
        if self.time_buckets == 0 || self.time_buckets > MAX_BUCKETS {
            return bad("time_buckets", format!("must be in 1..={MAX_BUCKETS}"));
        }
        if !(self.noise >= 0.0) || !self.intensity.is_finite() {
            return bad("noise", "noise must be non-negative and intensity finite".into());
        }
        Ok(())
    }

    pub fn clip_span(&self, clip: usize) -> Span {
        let secs = |f: usize| (f / self.fps as usize) as u32;
        Span::new(secs((clip - 1) * self.frames_per_clip), secs(clip * self.frames_per_clip))
    }
}

/// One planted symbol in one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedEvent {
    /// 1-based clip index.
    pub clip: usize,
    pub symbol: usize,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventPlan {
    pub events: Vec<PlannedEvent>,
    pub noise: f64,
    pub seed: u64,
}

impl EventPlan {
    pub fn symbol_at(&self, clip: usize) -> Option<usize> {
        self.events
            .iter()
            .find(|e| e.clip == clip && e.intensity != 0.0)
            .map(|e| e.symbol)
    }

    pub fn validate(&self, num_clips: usize, alphabet: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.events {
            if e.clip == 0 || e.clip > num_clips {
                return Err(Error::Data(format!("event clip {} outside 1..={num_clips}", e.clip)));
            }
            if e.symbol >= alphabet {
                return Err(Error::Data(format!("symbol {} outside alphabet of {alphabet}", e.symbol)));
            }
            if !seen.insert(e.clip) {
                return Err(Error::Data(format!("clip {} carries more than one symbol", e.clip)));
            }
        }
        Ok(())
    }

    /// Maximal runs of consecutive clips with the same symbol, as
    /// `(symbol, first clip, last clip)`.
    pub fn runs(&self, num_clips: usize) -> Vec<(usize, usize, usize)> {
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        for clip in 1..=num_clips {
            if let Some(s) = self.symbol_at(clip) {
                match runs.last_mut() {
                    Some(r) if r.0 == s && r.2 + 1 == clip => r.2 = clip,
                    _ => runs.push((s, clip, clip)),
                }
            }
        }
        runs
    }
}

/// Samples a plan of non-adjacent `event_clips`-long events.
pub fn sample_plan(cfg: &SynthConfig, seed: u64) -> Result<EventPlan> {
    cfg.validate("synth")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = rng.random_range(cfg.min_events..=cfg.max_events);
    let len = cfg.event_clips;
    // Choose n start slots among the free positions by stars-and-bars:
    // distribute the spare clips into n + 1 gaps, interior gaps get +1.
    let spare = cfg.num_clips + 1 - n * (len + 1);
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=spare)).collect();
    cuts.sort_unstable();
    let mut events = Vec::new();
    for (i, cut) in cuts.iter().enumerate() {
        let start = 1 + cut + i * (len + 1);
        let symbol = rng.random_range(0..cfg.alphabet);
        for clip in start..start + len {
            events.push(PlannedEvent {
                clip,
                symbol,
                intensity: cfg.intensity,
            });
        }
    }
    Ok(EventPlan {
        events,
        noise: cfg.noise,
        seed,
    })
}

/// Orthonormal symbol directions in merged channel space (Gram-Schmidt QR
/// of a seeded Gaussian matrix).
pub fn symbol_directions(alphabet: usize, channels: usize) -> Result<Vec<Vec<f64>>> {
    if alphabet > channels {
        return Err(Error::invalid(format!("{alphabet} orthonormal directions in {channels} dims")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(DIRECTION_SEED);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(alphabet);
    while basis.len() < alphabet {
        let mut v: Vec<f64> = (0..channels).map(|_| normal.sample(&mut rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Ok(basis)
}

/// Background Gaussian noise plus, on planted clips, `intensity · u_symbol`
/// added to every merged token of every frame.
pub fn gen_video(cfg: &SynthConfig, plan: &EventPlan) -> Result<VideoStream> {
    cfg.validate("synth")?;
    plan.validate(cfg.num_clips, cfg.alphabet)?;
    let dirs = symbol_directions(cfg.alphabet, cfg.merged_channels())?;
    let frames = cfg.num_clips * cfg.frames_per_clip;
    let per_frame = cfg.raw_tokens * cfg.raw_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut data = vec![0.0; frames * per_frame];
    if plan.noise > 0.0 {
        let normal = Normal::new(0.0, plan.noise).map_err(|e| Error::invalid(e.to_string()))?;
        data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    let merged = 4 * cfg.raw_channels;
    for e in &plan.events {
        let u = &dirs[e.symbol];
        for f in (e.clip - 1) * cfg.frames_per_clip..e.clip * cfg.frames_per_clip {
            let frame = &mut data[f * per_frame..(f + 1) * per_frame];
            // Groups of four consecutive raw tokens form one merged token
            // whose channels are the concatenation, i.e. `merged` values.
            for tok in frame.chunks_mut(merged) {
                for (v, d) in tok.iter_mut().zip(u) {
                    *v += e.intensity * d;
                }
            }
        }
    }
    VideoStream::new(Tensor::new(vec![frames, cfg.raw_tokens, cfg.raw_channels], data)?, cfg.fps)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QaKind {
    /// Symbol shown during `[first, last]` clips.
    WhatAtTime { first: usize, last: usize },
    /// Time bucket of the first clip showing `symbol`.
    WhenSymbol { symbol: usize },
    /// Number of distinct symbols.
    GlobalCount,
}

impl QaKind {
    pub fn label(&self) -> &'static str {
        match self {
            QaKind::WhatAtTime { .. } => "what_at_time",
            QaKind::WhenSymbol { .. } => "when_symbol",
            QaKind::GlobalCount => "global_count",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub kind: QaKind,
    /// Clip range `[first, last]` (1-based) the question is about; the
    /// whole stream unless the sample came from a concatenated video.
    pub scope: (usize, usize),
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    /// 1-based ground-truth clips.
    pub grounding: Vec<usize>,
}

fn span_of_clips(cfg: &SynthConfig, first: usize, last: usize) -> Span {
    Span::new(cfg.clip_span(first).start, cfg.clip_span(last).end)
}

fn render_question(cfg: &SynthConfig, kind: &QaKind, scope: (usize, usize), whole: bool) -> Result<Vec<TokenId>> {
    let suffix = if whole {
        String::new()
    } else {
        let s = span_of_clips(cfg, scope.0, scope.1);
        format!(" from {} to {} seconds", s.start, s.end)
    };
    let text = match kind {
        QaKind::WhatAtTime { first, last } => {
            let s = span_of_clips(cfg, *first, *last);
            format!("What symbol appears from {} to {} seconds?", s.start, s.end)
        }
        QaKind::WhenSymbol { symbol } => {
            format!("When does symbol {} appear{suffix}?", crate::tokenizer::token_str(symbol_token(*symbol))?)
        }
        QaKind::GlobalCount => format!("How many distinct symbols appear{suffix}?"),
    };
    tokenize(&text)
}

/// Answer implied by `plan` for a question of `kind` over `scope`.
fn expected_answer(cfg: &SynthConfig, plan: &EventPlan, kind: &QaKind, scope: (usize, usize)) -> Option<(TokenId, Vec<usize>)> {
    let in_scope = scope.0..=scope.1;
    match kind {
        QaKind::WhatAtTime { first, last } => {
            let s = plan.symbol_at(*first)?;
            if (*first..=*last).any(|c| plan.symbol_at(c) != Some(s)) {
                return None;
            }
            Some((symbol_token(s), (*first..=*last).collect()))
        }
        QaKind::WhenSymbol { symbol } => {
            let clips: Vec<usize> = in_scope.filter(|&c| plan.symbol_at(c) == Some(*symbol)).collect();
            let first = *clips.first()?;
            let len = scope.1 - scope.0 + 1;
            let bucket = (first - scope.0) * cfg.time_buckets / len;
            Some((bucket_token(bucket), clips))
        }
        QaKind::GlobalCount => {
            let clips: Vec<usize> = in_scope.filter(|&c| plan.symbol_at(c).is_some()).collect();
            if clips.is_empty() {
                return None;
            }
            let distinct: BTreeSet<usize> = clips.iter().filter_map(|&c| plan.symbol_at(c)).collect();
            if distinct.len() > 9 {
                return None;
            }
            Some((digit_token(distinct.len()), clips))
        }
    }
}

fn build_sample(cfg: &SynthConfig, plan: &EventPlan, kind: QaKind, scope: (usize, usize), total: usize) -> Result<QaSample> {
    let (answer, grounding) = expected_answer(cfg, plan, &kind, scope)
        .ok_or_else(|| Error::Data(format!("question {kind:?} has no answer under the plan")))?;
    let whole = scope == (1, total);
    Ok(QaSample {
        question: render_question(cfg, &kind, scope, whole)?,
        answer: vec![answer],
        grounding,
        kind,
        scope,
    })
}

/// One what-at-time question per event run, one when-symbol question per
/// distinct symbol, and one global-count question.
pub fn gen_qa(cfg: &SynthConfig, plan: &EventPlan) -> Result<Vec<QaSample>> {
    let k = cfg.num_clips;
    let runs = plan.runs(k);
    if runs.is_empty() {
        return Err(Error::Data("plan has no events".into()));
    }
    let scope = (1, k);
    let mut out = Vec::new();
    for &(_, first, last) in &runs {
        out.push(build_sample(cfg, plan, QaKind::WhatAtTime { first, last }, scope, k)?);
    }
    let symbols: BTreeSet<usize> = runs.iter().map(|r| r.0).collect();
    for symbol in symbols {
        out.push(build_sample(cfg, plan, QaKind::WhenSymbol { symbol }, scope, k)?);
    }
    out.push(build_sample(cfg, plan, QaKind::GlobalCount, scope, k)?);
    Ok(out)
}

/// Replays a sample against a plan: question text, answer and grounding
/// must all match what the plan implies.
pub fn validate_qa(cfg: &SynthConfig, plan: &EventPlan, total_clips: usize, sample: &QaSample) -> bool {
    let Some((answer, grounding)) = expected_answer(cfg, plan, &sample.kind, sample.scope) else {
        return false;
    };
    let whole = sample.scope == (1, total_clips);
    let question_ok = render_question(cfg, &sample.kind, sample.scope, whole)
        .map(|q| q == sample.question)
        .unwrap_or(false);
    question_ok
        && sample.answer == [answer]
        && sample.grounding == grounding
        && grounding.iter().all(|&c| c >= 1 && c <= total_clips)
}

/// A generated stream with its plan and questions.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub stream: VideoStream,
    pub plan: EventPlan,
    pub num_clips: usize,
    pub qa: Vec<QaSample>,
}

pub fn gen_sample(cfg: &SynthConfig, seed: u64) -> Result<VideoSample> {
    let plan = sample_plan(cfg, seed)?;
    Ok(VideoSample {
        stream: gen_video(cfg, &plan)?,
        qa: gen_qa(cfg, &plan)?,
        num_clips: cfg.num_clips,
        plan,
    })
}

/// Videos from consecutive seeds until at least `min_questions` questions
/// exist.
pub fn gen_dataset(cfg: &SynthConfig, min_questions: usize, seed: u64) -> Result<Vec<VideoSample>> {
    let mut out = Vec::new();
    let mut count = 0;
    let mut i = 0u64;
    while count < min_questions {
        let s = gen_sample(cfg, seed.wrapping_mul(1_000_003).wrapping_add(i))?;
        count += s.qa.len();
        out.push(s);
        i += 1;
    }
    Ok(out)
}

/// Concatenates streams in order. Grounding clips shift by the cumulative
/// clip offset, what-at-time times are re-based, and other questions are
/// scoped to their source segment.
pub fn concat_videos(cfg: &SynthConfig, parts: &[VideoSample]) -> Result<VideoSample> {
    let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let fps = first.stream.fps;
    if parts.iter().any(|p| p.stream.fps != fps) {
        return Err(Error::Data("frame rate mismatch".into()));
    }
    let shape = first.stream.frames.shape().to_vec();
    let total: usize = parts.iter().map(|p| p.num_clips).sum();
    let mut data = Vec::new();
    let mut events = Vec::new();
    let mut qa = Vec::new();
    let mut offset = 0;
    for p in parts {
        if p.stream.frames.shape()[1..] != shape[1..] {
            return Err(Error::Data("frame shape mismatch".into()));
        }
        if p.stream.num_frames() != p.num_clips * cfg.frames_per_clip {
            return Err(Error::Data("stream length is not a whole number of clips".into()));
        }
        data.extend_from_slice(p.stream.frames.data());
        events.extend(p.plan.events.iter().map(|e| PlannedEvent {
            clip: e.clip + offset,
            ..e.clone()
        }));
        for q in &p.qa {
            let kind = match q.kind {
                QaKind::WhatAtTime { first, last } => QaKind::WhatAtTime {
                    first: first + offset,
                    last: last + offset,
                },
                ref other => other.clone(),
            };
            let scope = (q.scope.0 + offset, q.scope.1 + offset);
            let whole = scope == (1, total);
            qa.push(QaSample {
                question: render_question(cfg, &kind, scope, whole)?,
                answer: q.answer.clone(),
                grounding: q.grounding.iter().map(|c| c + offset).collect(),
                kind,
                scope,
            });
        }
        offset += p.num_clips;
    }
    let frames = data.len() / (shape[1] * shape[2]);
    Ok(VideoSample {
        stream: VideoStream::new(Tensor::new(vec![frames, shape[1], shape[2]], data)?, fps)?,
        plan: EventPlan {
            events,
            noise: first.plan.noise,
            seed: first.plan.seed,
        },
        num_clips: total,
        qa,
    })
}

/// Writes a stream payload in the `VSDS` container (tensor container
/// layout with its own magic).
pub fn write_stream(path: &Path, stream: &VideoStream) -> Result<()> {
    let fps = Tensor::scalar(stream.fps as f64);
    let w = BufWriter::new(File::create(path)?);
    write_tensors_with_magic(w, DATASET_MAGIC, &[("frames", &stream.frames), ("fps", &fps)])
}

pub fn read_stream(path: &Path) -> Result<VideoStream> {
    let f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let tensors = read_tensors_with_magic(BufReader::new(f), DATASET_MAGIC, "stream payload")?;
    let get = |n: &str| {
        tensors
            .iter()
            .find(|(name, _)| name == n)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Data(format!("stream payload lacks `{n}`")))
    };
    let fps = get("fps")?.data()[0];
    if fps < 1.0 || fps.fract() != 0.0 {
        return Err(Error::Data(format!("invalid frame rate {fps}")));
    }
    VideoStream::new(get("frames")?, fps as u32)
}

/// One dataset line: a QA sample plus the stream it refers to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub stream: String,
    pub video: usize,
    pub num_clips: usize,
    pub plan: EventPlan,
    #[serde(flatten)]
    pub sample: QaSample,
}

/// Writes `<dir>/video_XXXX.vsds` payloads and `<dir>/<name>.jsonl`.
pub fn write_dataset(dir: &Path, name: &str, videos: &[VideoSample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let index = dir.join(format!("{name}.jsonl"));
    let mut out = BufWriter::new(File::create(&index)?);
    for (i, v) in videos.iter().enumerate() {
        let file = format!("{name}_video_{i:05}.vsds");
        write_stream(&dir.join(&file), &v.stream)?;
        for q in &v.qa {
            let rec = DatasetRecord {
                stream: file.clone(),
                video: i,
                num_clips: v.num_clips,
                plan: v.plan.clone(),
                sample: q.clone(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(index)
}

/// Reads a dataset index and its stream payloads back into videos.
pub fn read_dataset(index: &Path) -> Result<Vec<VideoSample>> {
    let dir = index.parent().unwrap_or(Path::new("."));
    let f = File::open(index).map_err(|e| Error::Data(format!("{}: {e}", index.display())))?;
    let mut videos: Vec<VideoSample> = Vec::new();
    let mut current: Option<usize> = None;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", index.display(), n + 1)))?;
        if current != Some(rec.video) {
            videos.push(VideoSample {
                stream: read_stream(&dir.join(&rec.stream))?,
                plan: rec.plan.clone(),
                num_clips: rec.num_clips,
                qa: Vec::new(),
            });
            current = Some(rec.video);
        }
        videos.last_mut().expect("pushed above").qa.push(rec.sample);
    }
    if videos.is_empty() {
        return Err(Error::Data(format!("{} holds no samples", index.display())));
    }
    Ok(videos)
}

/// Single-clip caption data for the clip-level stage: `(features, caption
/// tokens)` where the caption names the planted symbol or says nothing.
pub fn gen_caption_clip(cfg: &SynthConfig, symbol: Option<usize>, seed: u64) -> Result<(VideoStream, Vec<TokenId>)> {
    let one = SynthConfig {
        num_clips: 1,
        event_clips: 1,
        min_events: 1,
        max_events: 1,
        ..cfg.clone()
    };
    let plan = EventPlan {
        events: symbol
            .map(|s| PlannedEvent { clip: 1, symbol: s, intensity: cfg.intensity })
            .into_iter()
            .collect(),
        noise: cfg.noise,
        seed,
    };
    let stream = gen_video(&one, &plan)?;
    let text = match symbol {
        Some(s) => format!("The clip shows {} .", crate::tokenizer::token_str(symbol_token(s))?),
        None => "The clip shows nothing .".to_string(),
    };
    Ok((stream, tokenize(&text)?))
}

/// Random symbol (or none, one time in `alphabet + 1`) for caption data.
pub fn random_caption_symbol<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Option<usize> {
    let s = rng.random_range(0..=cfg.alphabet);
    (s < cfg.alphabet).then_some(s)
}
