//! Two-stage progressive training: clip-level captioning under the prefix
//! mask, then streaming long-stream QA with optional selection warm-up.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::clip::{build_prefix_mask, init_summarization, merge_adjacent_tokens, ClipFeatures, RawFrameFeatures, SummarizationTokens};
use crate::error::{Error, Result};
use crate::lm::Depth;
use crate::model::{answer_targets, StreamModel, CLIP_PROJECTOR, ENCODER_PREFIX};
use crate::optim::{cosine_lr, Adam};
use crate::selector::selection_kl_loss;
use crate::streaming::{prepare_clips, segment_video, PreparedClip};
use crate::synth::{gen_caption_clip, random_caption_symbol, QaSample, SynthConfig, VideoSample};
use crate::tokenizer::{TokenId, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Projector only.
    Align,
    /// Encoder and projector.
    ClipInstruct,
    /// Next-token plus KL selection loss on labeled questions.
    Warmup,
    /// Next-token loss, labels optional.
    Joint,
}

/// Grounding-supervision schedule for the streaming stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// No labels anywhere.
    FullyWeak,
    /// Warm-up on the labeled subset, then label-free joint training.
    #[default]
    Warmup,
    /// One joint phase over all data; labeled questions add the KL term.
    Mixed,
    /// Warm-up, then joint training that keeps using the labels.
    WarmupMixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub next_token: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { next_token: 1.0, kl: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weights: LossWeights,
    /// Add the KL term on questions flagged as labeled.
    pub use_labels: bool,
    /// Samples per optimizer step (captions in stage 1, videos in stage 2).
    pub batch: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Warmup && !self.use_labels {
            return Err(Error::config("train.use_labels", "warm-up requires grounding labels"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if self.weights.kl < 0.0 || self.weights.next_token < 0.0 {
            return Err(Error::config("train.weights", "loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Applies the stage's trainable-parameter contract.
    pub fn apply_freeze(&self, model: &mut StreamModel) {
        let store = &mut model.store;
        match self.stage {
            Stage::Align => {
                store.set_all_trainable(false);
                store.set_trainable_prefix(CLIP_PROJECTOR, true);
            }
            Stage::ClipInstruct => {
                store.set_all_trainable(false);
                store.set_trainable_prefix(CLIP_PROJECTOR, true);
                store.set_trainable_prefix(&format!("{ENCODER_PREFIX}."), true);
            }
            Stage::Warmup | Stage::Joint => store.set_all_trainable(true),
        }
    }
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

/// A captioned clip ready for the prefix task.
#[derive(Clone, Debug)]
pub struct CaptionSample {
    pub features: ClipFeatures,
    pub summarization: SummarizationTokens,
    pub text: Vec<TokenId>,
}

pub fn caption_samples(synth: &SynthConfig, model: &StreamModel, n: usize, seed: u64) -> Result<Vec<CaptionSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &model.config;
    (0..n)
        .map(|i| {
            let symbol = random_caption_symbol(synth, &mut rng);
            let (stream, text) = gen_caption_clip(synth, symbol, seed.wrapping_mul(7919).wrapping_add(i as u64))?;
            let raw = RawFrameFeatures::new(stream.frames)?;
            let features = merge_adjacent_tokens(&raw, cfg.merge_layout)?;
            let summarization = init_summarization(&features, cfg.summarization_per_frame, features.frames())?;
            Ok(CaptionSample {
                features,
                summarization,
                text,
            })
        })
        .collect()
}

/// Next-token loss on the text rows of `[F ∘ S ∘ text]` under the prefix
/// mask; feature and summarization rows carry no target.
pub fn caption_loss(model: &StreamModel, tape: &mut Tape, sample: &CaptionSample) -> Result<Var> {
    if sample.text.is_empty() {
        return Err(Error::Data("empty caption".into()));
    }
    let enc = &model.encoder.clip;
    let cs = enc.clip_sequence(tape, &model.store, &sample.features, &sample.summarization, &sample.text)?;
    let mask = Arc::new(build_prefix_mask(cs.spec)?);
    let out = enc.lm.forward(tape, &model.store, &cs.seq, &mask, Depth::Full)?;
    let logits = out.logits.expect("full depth");
    tape.cross_entropy(logits, &caption_targets(cs.spec.total(), &sample.text))
}

/// Targets for a caption occupying the last `text.len()` rows.
pub fn caption_targets(len: usize, text: &[TokenId]) -> Vec<Option<usize>> {
    let start = len - text.len();
    let mut t = vec![None; len];
    for (j, slot) in t[start..].iter_mut().enumerate() {
        *slot = Some(text.get(j + 1).copied().unwrap_or(EOS));
    }
    t
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
    order.shuffle(&mut rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn optimize<F>(model: &mut StreamModel, plan: &TrainPlan, n: usize, log: &mut dyn FnMut(&EpochLog, &StreamModel), mut loss_of: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&StreamModel, &mut Tape, usize, u64) -> Result<Option<Var>>,
{
    plan.validate()?;
    if n == 0 {
        return Err(Error::Data("no training samples".into()));
    }
    plan.apply_freeze(model);
    model.store.zero_grads();
    let mut adam = Adam::new(&model.store);
    let per_epoch = n.div_ceil(plan.batch);
    let total = per_epoch * plan.epochs;
    let mut logs = Vec::new();
    let mut step = 0;
    for epoch in 0..plan.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in batches(n, plan.batch, plan.seed, epoch) {
            let mut tape = Tape::new();
            let mut parts = Vec::new();
            for &i in &batch {
                let seed = plan.seed ^ ((epoch * n + i) as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
                if let Some(l) = loss_of(model, &mut tape, i, seed)? {
                    parts.push(l);
                }
            }
            if parts.is_empty() {
                continue;
            }
            let joined = if parts.len() == 1 {
                parts[0]
            } else {
                let rows = reshape_all(&mut tape, &parts)?;
                tape.concat_rows(&rows)?
            };
            let loss = tape.mean(joined)?;
            sum += tape.value(loss).data()[0];
            count += 1;
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut model.store);
            adam.step(&mut model.store, cosine_lr(plan.learning_rate, step, total));
            step += 1;
        }
        let entry = EpochLog {
            stage: plan.stage,
            epoch,
            mean_loss: if count > 0 { sum / count as f64 } else { f64::NAN },
            steps: count,
        };
        log(&entry, model);
        logs.push(entry);
    }
    Ok(logs)
}

fn reshape_all(tape: &mut Tape, parts: &[Var]) -> Result<Vec<Var>> {
    parts.iter().map(|&p| tape.reshape(p, vec![1, 1])).collect()
}

/// Clip-level stage (`Align` or `ClipInstruct`).
pub fn train_stage1(
    model: &mut StreamModel,
    plan: &TrainPlan,
    data: &[CaptionSample],
    log: &mut dyn FnMut(&EpochLog, &StreamModel),
) -> Result<Vec<EpochLog>> {
    if !matches!(plan.stage, Stage::Align | Stage::ClipInstruct) {
        return Err(Error::config("train.stage", "stage 1 runs align or clip_instruct"));
    }
    optimize(model, plan, data.len(), log, |m, tape, i, _| caption_loss(m, tape, &data[i]).map(Some))
}

/// A long stream with its prepared clips and questions; `labeled[i]`
/// marks questions whose grounding may supervise selection.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub clips: Vec<PreparedClip>,
    pub qa: Vec<QaSample>,
    pub labeled: Vec<bool>,
}

pub fn prepare_videos(model: &StreamModel, videos: &[VideoSample], labeled: impl Fn(usize, usize) -> bool) -> Result<Vec<TrainVideo>> {
    let settings = model.encoder.settings.clone();
    videos
        .iter()
        .enumerate()
        .map(|(v, s)| {
            let clips = prepare_clips(&segment_video(&s.stream, settings.frames_per_clip)?, &settings)?;
            Ok(TrainVideo {
                clips,
                labeled: (0..s.qa.len()).map(|q| labeled(v, q)).collect(),
                qa: s.qa.clone(),
            })
        })
        .collect()
}

/// Mean per-question loss of one video, encoded on `tape` with gradients
/// through the whole memory chain.
pub fn video_loss(model: &StreamModel, tape: &mut Tape, video: &TrainVideo, plan: &TrainPlan, seed: u64) -> Result<Option<Var>> {
    let questions: Vec<usize> = (0..video.qa.len())
        .filter(|&q| plan.stage != Stage::Warmup || video.labeled[q])
        .collect();
    if questions.is_empty() {
        return Ok(None);
    }
    let steps = model.encoder.encode_on_tape(tape, &model.store, &video.clips)?;
    let mut losses = Vec::with_capacity(questions.len());
    for (n, &q) in questions.iter().enumerate() {
        let sample = &video.qa[q];
        let pass = model.question_pass(tape, &steps, &sample.question, &sample.answer, true, seed.wrapping_add(n as u64))?;
        let len = tape.value(pass.logits).rows();
        let ce = tape.cross_entropy(pass.logits, &answer_targets(len, pass.answer_row, &sample.answer))?;
        let mut loss = tape.scale(ce, plan.weights.next_token)?;
        if plan.use_labels && video.labeled[q] && plan.weights.kl > 0.0 {
            let kl = selection_kl_loss(tape, pass.similarities, &sample.grounding, model.config.selection.temperature)?;
            let kl = tape.scale(kl, plan.weights.kl)?;
            loss = tape.add(loss, kl)?;
        }
        losses.push(tape.reshape(loss, vec![1, 1])?);
    }
    let all = if losses.len() == 1 { losses[0] } else { tape.concat_rows(&losses)? };
    tape.mean(all).map(Some)
}

/// Streaming stage (`Warmup` or `Joint`). Warm-up only visits labeled
/// questions.
pub fn train_stage2(
    model: &mut StreamModel,
    plan: &TrainPlan,
    data: &[TrainVideo],
    log: &mut dyn FnMut(&EpochLog, &StreamModel),
) -> Result<Vec<EpochLog>> {
    if !matches!(plan.stage, Stage::Warmup | Stage::Joint) {
        return Err(Error::config("train.stage", "stage 2 runs warmup or joint"));
    }
    if plan.stage == Stage::Warmup && !data.iter().any(|v| v.labeled.iter().any(|&l| l)) {
        return Err(Error::Data("warm-up needs at least one labeled question".into()));
    }
    optimize(model, plan, data.len(), log, |m, tape, i, seed| video_loss(m, tape, &data[i], plan, seed))
}

/// Phase plans for a regime: `(plan, videos)` where videos are indices
/// into the labeled or unlabeled pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub plan: TrainPlan,
    pub pool: Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Labeled,
    Unlabeled,
    All,
}

pub fn regime_phases(regime: Regime, warmup: &TrainPlan, joint: &TrainPlan) -> Vec<Phase> {
    let warm = Phase {
        plan: TrainPlan {
            stage: Stage::Warmup,
            use_labels: true,
            ..warmup.clone()
        },
        pool: Pool::Labeled,
    };
    let joint_with = |use_labels, pool| Phase {
        plan: TrainPlan {
            stage: Stage::Joint,
            use_labels,
            ..joint.clone()
        },
        pool,
    };
    match regime {
        Regime::FullyWeak => vec![joint_with(false, Pool::All)],
        Regime::Warmup => vec![warm, joint_with(false, Pool::Unlabeled)],
        Regime::Mixed => vec![joint_with(true, Pool::All)],
        Regime::WarmupMixed => vec![warm, joint_with(true, Pool::All)],
    }
}

/// Splits videos into a labeled pool (the first `ceil(fraction · n)`) and
/// the rest.
pub fn split_labeled(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).min(n)
}

/// Runs a regime's phases over `videos`, labeling the first
/// `split_labeled` of them.
pub fn run_regime(
    model: &mut StreamModel,
    regime: Regime,
    warmup: &TrainPlan,
    joint: &TrainPlan,
    videos: &[VideoSample],
    label_fraction: f64,
    log: &mut dyn FnMut(&EpochLog, &StreamModel),
) -> Result<Vec<EpochLog>> {
    let cut = split_labeled(videos.len(), label_fraction);
    let prepared = prepare_videos(model, videos, |v, _| v < cut)?;
    let mut logs = Vec::new();
    for phase in regime_phases(regime, warmup, joint) {
        let pool: Vec<TrainVideo> = match phase.pool {
            Pool::Labeled => prepared[..cut].to_vec(),
            Pool::Unlabeled if cut < prepared.len() => prepared[cut..].to_vec(),
            Pool::Unlabeled | Pool::All => prepared.clone(),
        };
        logs.extend(train_stage2(model, &phase.plan, &pool, log)?);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn plan(stage: Stage) -> TrainPlan {
        TrainPlan {
            stage,
            learning_rate: 3e-3,
            epochs: 1,
            weights: LossWeights::default(),
            use_labels: true,
            batch: 2,
            seed: 5,
        }
    }

    #[test]
    fn caption_targets_cover_text_rows_only() {
        let t = caption_targets(6, &[7, 8]);
        assert_eq!(t, vec![None, None, None, None, Some(8), Some(EOS)]);
    }

    #[test]
    fn warmup_without_labels_is_rejected() {
        let p = TrainPlan { use_labels: false, ..plan(Stage::Warmup) };
        assert!(matches!(p.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn align_leaves_encoder_untouched() {
        let mut m = StreamModel::new(ModelConfig::default(), 1).unwrap();
        let synth = SynthConfig::default();
        let data = caption_samples(&synth, &m, 4, 3).unwrap();
        let before = m.store.clone();
        train_stage1(&mut m, &plan(Stage::Align), &data, &mut |_, _| {}).unwrap();
        let mut changed_projector = false;
        for id in m.store.ids() {
            let name = m.store.name(id);
            let same = m.store.value(id).bit_eq(before.value(id));
            if name.starts_with(CLIP_PROJECTOR) {
                changed_projector |= !same;
            } else {
                assert!(same, "{name} changed during alignment");
            }
        }
        assert!(changed_projector);
    }

    #[test]
    fn regimes_map_to_phases() {
        let w = plan(Stage::Warmup);
        let j = plan(Stage::Joint);
        let weak = regime_phases(Regime::FullyWeak, &w, &j);
        assert_eq!(weak.len(), 1);
        assert!(!weak[0].plan.use_labels);
        let default = regime_phases(Regime::default(), &w, &j);
        assert_eq!(default.iter().map(|p| p.plan.stage).collect::<Vec<_>>(), vec![Stage::Warmup, Stage::Joint]);
        assert!(!default[1].plan.use_labels);
        assert!(regime_phases(Regime::Mixed, &w, &j)[0].plan.use_labels);
    }
}
