//! End-to-end runs driven by a [`RunConfig`]: data splits, both training
//! stages, and the token/latency budget report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lm::Decoding;
use crate::model::{SelectionStrategy, StreamModel};
use crate::synth::{gen_dataset, gen_sample, SynthConfig, VideoSample};
use crate::tokenizer::tokenize;
use crate::train::{caption_samples, run_regime, train_stage1, EpochLog, Stage};

/// Seed offset separating the held-out split from training data.
const TEST_SEED_OFFSET: u64 = 0x7e57_0000;

pub fn train_split(cfg: &RunConfig) -> Result<Vec<VideoSample>> {
    gen_dataset(&cfg.synth, cfg.data.train_questions, cfg.seeds.data)
}

pub fn test_split(cfg: &RunConfig) -> Result<Vec<VideoSample>> {
    gen_dataset(&cfg.synth, cfg.data.test_questions, cfg.seeds.data.wrapping_add(TEST_SEED_OFFSET))
}

pub type Logger<'a> = &'a mut dyn FnMut(&EpochLog, &StreamModel);

/// Fresh model through the clip-level stage (alignment, then
/// instruction).
pub fn run_stage1(cfg: &RunConfig, log: Logger) -> Result<StreamModel> {
    let mut model = StreamModel::new(cfg.model.clone(), cfg.seeds.init)?;
    let captions = caption_samples(&cfg.synth, &model, cfg.stage1.captions, cfg.seeds.data ^ 0xca97)?;
    train_stage1(&mut model, &cfg.plan(Stage::Align), &captions, log)?;
    train_stage1(&mut model, &cfg.plan(Stage::ClipInstruct), &captions, log)?;
    Ok(model)
}

/// Streaming stage under the configured regime.
pub fn run_stage2(model: &mut StreamModel, cfg: &RunConfig, train: &[VideoSample], log: Logger) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Data("no training streams".into()));
    }
    run_regime(
        model,
        cfg.stage2.regime,
        &cfg.plan(Stage::Warmup),
        &cfg.plan(Stage::Joint),
        train,
        cfg.stage2.label_fraction,
        log,
    )
}

/// Both stages from scratch.
pub fn train_full(cfg: &RunConfig, train: &[VideoSample], log: Logger) -> Result<StreamModel> {
    let mut model = run_stage1(cfg, log)?;
    run_stage2(&mut model, cfg, train, log)?;
    Ok(model)
}

/// A model for `cfg` carrying the parameter values of `from`.
pub fn rebuild(cfg: &RunConfig, from: &StreamModel) -> Result<StreamModel> {
    let mut m = StreamModel::new(cfg.model.clone(), cfg.seeds.init)?;
    m.store.load_values_from(&from.store)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub clips: usize,
    /// Memory tokens given to the reader.
    pub reader_memory_tokens: usize,
    /// Full reader input, memories plus question.
    pub reader_input_tokens: usize,
    pub encode_secs: f64,
    /// Mean wall time of one answer against the persisted bank.
    pub answer_secs: f64,
}

/// Encodes a `K`-clip stream for each `K` and times encoding and
/// answering. Memory tokens stay at `V·T·P` for every `K`.
pub fn budget_report(model: &StreamModel, synth: &SynthConfig, ks: &[usize], repeats: usize, seed: u64) -> Result<Vec<BudgetRow>> {
    let question = tokenize("How many distinct symbols appear?")?;
    let repeats = repeats.max(1);
    ks.iter()
        .map(|&k| {
            let s = SynthConfig {
                num_clips: k,
                event_clips: 1,
                min_events: 1,
                max_events: 1,
                ..synth.clone()
            };
            let video = gen_sample(&s, seed)?;
            let t = Instant::now();
            let bank = model.encode(&video.stream)?;
            let encode_secs = t.elapsed().as_secs_f64();
            let mut input = 0;
            let t = Instant::now();
            for _ in 0..repeats {
                input = model
                    .answer(&bank, &question, &Decoding::Greedy, SelectionStrategy::Learned)?
                    .reader_input_len;
            }
            Ok(BudgetRow {
                clips: k,
                reader_memory_tokens: model.config.reader_memory_tokens(),
                reader_input_tokens: input,
                encode_secs,
                answer_secs: t.elapsed().as_secs_f64() / repeats as f64,
            })
        })
        .collect()
}

pub fn budget_table(rows: &[BudgetRow]) -> String {
    let mut out = format!("{:>6} {:>14} {:>12} {:>12} {:>12}\n", "K", "memory_tokens", "input_tokens", "encode_s", "answer_s");
    for r in rows {
        out.push_str(&format!(
            "{:>6} {:>14} {:>12} {:>12.4} {:>12.5}\n",
            r.clips, r.reader_memory_tokens, r.reader_input_tokens, r.encode_secs, r.answer_secs
        ));
    }
    out
}
