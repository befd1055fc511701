//! Grounding and answer evaluation over a set of long streams.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Decoding;
use crate::model::{SelectionStrategy, StreamModel};
use crate::synth::{QaKind, QaSample, VideoSample};
use crate::tokenizer::{bucket_token, detokenize, digit_token, symbol_token, TokenId, MAX_BUCKETS, MAX_SYMBOLS};

/// `|selected ∩ gt| / |selected|` over 1-based clip indices.
pub fn iop(selected: &[usize], gt: &[usize]) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    let inter = selected.iter().filter(|s| gt.contains(s)).count();
    inter as f64 / selected.len() as f64
}

pub fn hit(selected: &[usize], gt: &[usize]) -> bool {
    selected.iter().any(|s| gt.contains(s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub video: usize,
    pub question: usize,
    pub kind: String,
    pub text: String,
    pub expected: String,
    pub predicted: String,
    pub correct: bool,
    /// 1-based selected clips.
    pub selected: Vec<usize>,
    pub grounding: Vec<usize>,
    pub iop: f64,
    pub hit: bool,
    /// Answered correctly with IoP ≥ 0.5.
    pub joint: bool,
    /// Every grounding clip lies in the first half of the stream.
    pub early: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub questions: usize,
    pub hit_rate: f64,
    pub mean_iop: f64,
    /// Fraction of questions with IoP ≥ 0.5.
    pub iop_at_half: f64,
    pub answer_accuracy: f64,
    pub joint_accuracy: f64,
}

impl Aggregate {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a QuestionRecord>) -> Self {
        let mut a = Aggregate::default();
        for r in records {
            a.questions += 1;
            a.hit_rate += r.hit as u8 as f64;
            a.mean_iop += r.iop;
            a.iop_at_half += (r.iop >= 0.5) as u8 as f64;
            a.answer_accuracy += r.correct as u8 as f64;
            a.joint_accuracy += r.joint as u8 as f64;
        }
        if a.questions > 0 {
            let n = a.questions as f64;
            a.hit_rate /= n;
            a.mean_iop /= n;
            a.iop_at_half /= n;
            a.answer_accuracy /= n;
            a.joint_accuracy /= n;
        }
        a
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub overall: Aggregate,
    pub by_kind: BTreeMap<String, Aggregate>,
    /// What-at-time questions about the first half of the stream.
    pub early_what_at_time: Aggregate,
}

impl EvalSummary {
    pub fn from_records(records: &[QuestionRecord]) -> Self {
        let mut by_kind: BTreeMap<String, Vec<&QuestionRecord>> = BTreeMap::new();
        for r in records {
            by_kind.entry(r.kind.clone()).or_default().push(r);
        }
        EvalSummary {
            overall: Aggregate::of(records),
            by_kind: by_kind.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect(),
            early_what_at_time: Aggregate::of(records.iter().filter(|r| r.early && r.kind == "what_at_time")),
        }
    }

    pub fn kind(&self, kind: &str) -> Aggregate {
        self.by_kind.get(kind).cloned().unwrap_or_default()
    }

    /// Plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "subset", "n", "hit", "mIoP", "IoP>=.5", "acc", "joint"
        );
        let mut row = |name: &str, a: &Aggregate| {
            out.push_str(&format!(
                "{:<16} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                name, a.questions, a.hit_rate, a.mean_iop, a.iop_at_half, a.answer_accuracy, a.joint_accuracy
            ));
        };
        row("all", &self.overall);
        for (k, a) in &self.by_kind {
            row(k, a);
        }
        row("early_what", &self.early_what_at_time);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub strategy: SelectionStrategy,
    /// Restrict decoding to the answer type's closed option set.
    pub multi_choice: bool,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            strategy: SelectionStrategy::Learned,
            multi_choice: false,
            workers: 1,
        }
    }
}

/// Closed option set for a question kind.
pub fn answer_options(kind: &QaKind) -> Vec<TokenId> {
    match kind {
        QaKind::WhatAtTime { .. } => (0..MAX_SYMBOLS).map(symbol_token).collect(),
        QaKind::WhenSymbol { .. } => (0..MAX_BUCKETS).map(bucket_token).collect(),
        QaKind::GlobalCount => (0..10).map(digit_token).collect(),
    }
}

fn text(tokens: &[TokenId]) -> String {
    detokenize(tokens).unwrap_or_else(|_| format!("{tokens:?}"))
}

fn eval_video(model: &StreamModel, v: usize, video: &VideoSample, opts: &EvalOptions) -> Result<Vec<QuestionRecord>> {
    let bank = model.encode(&video.stream)?;
    let k = bank.len();
    video
        .qa
        .iter()
        .enumerate()
        .map(|(q, sample)| record(model, &bank, v, q, sample, k, opts))
        .collect()
}

fn record(
    model: &StreamModel,
    bank: &crate::streaming::MemoryBank,
    v: usize,
    q: usize,
    sample: &QaSample,
    k: usize,
    opts: &EvalOptions,
) -> Result<QuestionRecord> {
    let decoding = if opts.multi_choice {
        Decoding::Choice(answer_options(&sample.kind))
    } else {
        Decoding::Greedy
    };
    let ans = model.answer(bank, &sample.question, &decoding, opts.strategy)?;
    let selected: Vec<usize> = ans.selection.indices().iter().map(|i| bank.entries[*i].index).collect();
    let correct = ans.tokens == sample.answer;
    let iop = iop(&selected, &sample.grounding);
    Ok(QuestionRecord {
        video: v,
        question: q,
        kind: sample.kind.label().to_string(),
        text: text(&sample.question),
        expected: text(&sample.answer),
        predicted: text(&ans.tokens),
        correct,
        hit: hit(&selected, &sample.grounding),
        joint: correct && iop >= 0.5,
        early: sample.grounding.iter().all(|&c| 2 * c <= k),
        selected,
        grounding: sample.grounding.clone(),
        iop,
    })
}

/// Encodes each stream once and answers all of its questions; streams
/// are spread over `workers` threads.
pub fn evaluate(model: &StreamModel, videos: &[VideoSample], opts: &EvalOptions) -> Result<(Vec<QuestionRecord>, EvalSummary)> {
    if videos.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let workers = opts.workers.clamp(1, videos.len());
    let mut results: Vec<Result<Vec<QuestionRecord>>> = Vec::with_capacity(videos.len());
    if workers == 1 {
        results.extend(videos.iter().enumerate().map(|(v, s)| eval_video(model, v, s, opts)));
    } else {
        let chunk = videos.len().div_ceil(workers);
        let per_worker: Vec<Vec<Result<Vec<QuestionRecord>>>> = thread::scope(|scope| {
            let handles: Vec<_> = videos
                .chunks(chunk)
                .enumerate()
                .map(|(w, part)| {
                    scope.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(i, s)| eval_video(model, w * chunk + i, s, opts))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        results.extend(per_worker.into_iter().flatten());
    }
    let mut records = Vec::new();
    for r in results {
        records.extend(r?);
    }
    let summary = EvalSummary::from_records(&records);
    Ok((records, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{gen_dataset, SynthConfig};

    #[test]
    fn iop_ratios() {
        assert_eq!(iop(&[1, 2, 3, 4], &[1, 2, 3, 4]), 1.0);
        assert_eq!(iop(&[1, 2, 3, 4], &[3]), 0.25);
        assert_eq!(iop(&[1, 2], &[5]), 0.0);
        assert!(hit(&[1, 9], &[9]));
        assert!(!hit(&[1, 2], &[3]));
    }

    #[test]
    fn workers_do_not_change_results() {
        let synth = SynthConfig { num_clips: 6, min_events: 1, max_events: 2, ..SynthConfig::default() };
        let videos = gen_dataset(&synth, 8, 3).unwrap();
        let m = StreamModel::new(ModelConfig::default(), 2).unwrap();
        let one = evaluate(&m, &videos, &EvalOptions::default()).unwrap();
        let three = evaluate(&m, &videos, &EvalOptions { workers: 3, ..EvalOptions::default() }).unwrap();
        assert_eq!(one, three);
        assert_eq!(one.1.overall.questions, videos.iter().map(|v| v.qa.len()).sum::<usize>());
    }

    #[test]
    fn multi_choice_answers_stay_in_option_set() {
        let synth = SynthConfig { num_clips: 6, min_events: 1, max_events: 2, ..SynthConfig::default() };
        let videos = gen_dataset(&synth, 4, 9).unwrap();
        let m = StreamModel::new(ModelConfig::default(), 2).unwrap();
        let opts = EvalOptions { multi_choice: true, ..EvalOptions::default() };
        let (records, _) = evaluate(&m, &videos, &opts).unwrap();
        for (r, q) in records.iter().zip(videos.iter().flat_map(|v| &v.qa)) {
            let tokens = crate::tokenizer::tokenize(&r.predicted).unwrap();
            assert_eq!(tokens.len(), 1);
            assert!(answer_options(&q.kind).contains(&tokens[0]));
        }
    }
}
