//! Single-clip condensation: token merging, summarization-token
//! initialization, the prefix-task attention mask, and extraction of the
//! condensed representation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{adaptive_avg_pool, Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{Depth, MiniLm, PackedSequence, Role};
use crate::mask::AttentionMask;
use crate::nn::Projector;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Pre-merge frame features, shape `[T, N₀, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrameFeatures(pub Tensor);

impl RawFrameFeatures {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape("raw features", format!("expected [T, N0, c], got {:?}", t.shape())));
        }
        Ok(RawFrameFeatures(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Merged clip features `F`, shape `[T, N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures(pub Tensor);

impl ClipFeatures {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape("clip features", format!("expected [T, N, C], got {:?}", t.shape())));
        }
        Ok(ClipFeatures(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    /// Tokens flattened to a `(T·N) x C` matrix.
    pub fn as_matrix(&self) -> Tensor {
        self.0
            .clone()
            .reshape(vec![self.frames() * self.tokens(), self.channels()])
            .expect("same value count")
    }

    fn frame(&self, t: usize) -> Tensor {
        let (n, c) = (self.tokens(), self.channels());
        Tensor::new(vec![n, c], self.0.data()[t * n * c..(t + 1) * n * c].to_vec()).expect("frame slice")
    }
}

/// Which four raw tokens are merged into one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeLayout {
    /// Four consecutive tokens in raw order.
    #[default]
    Consecutive,
    /// 2x2 windows of a row-major token grid `width` tokens wide.
    Grid2x2 { width: usize },
}

/// Raw token indices merged into output token `g`, in channel order.
fn merge_group(layout: MergeLayout, tokens: usize, g: usize) -> Result<[usize; 4]> {
    match layout {
        MergeLayout::Consecutive => Ok([4 * g, 4 * g + 1, 4 * g + 2, 4 * g + 3]),
        MergeLayout::Grid2x2 { width } => {
            if width == 0 || width % 2 != 0 || tokens % width != 0 || (tokens / width) % 2 != 0 {
                return Err(Error::invalid(format!(
                    "{tokens} tokens do not form an even grid of width {width}"
                )));
            }
            let per_row = width / 2;
            let (r, c) = (2 * (g / per_row), 2 * (g % per_row));
            Ok([r * width + c, r * width + c + 1, (r + 1) * width + c, (r + 1) * width + c + 1])
        }
    }
}

/// Concatenates groups of four raw tokens along channels: `N = N₀/4`,
/// `C = 4c`.
pub fn merge_adjacent_tokens(raw: &RawFrameFeatures, layout: MergeLayout) -> Result<ClipFeatures> {
    let (t, n0, c) = (raw.frames(), raw.tokens(), raw.channels());
    if n0 % 4 != 0 {
        return Err(Error::invalid(format!("token count {n0} is not divisible by 4")));
    }
    let n = n0 / 4;
    let src = raw.0.data();
    let mut out = Vec::with_capacity(src.len());
    for f in 0..t {
        let frame = &src[f * n0 * c..(f + 1) * n0 * c];
        for g in 0..n {
            for idx in merge_group(layout, n0, g)? {
                out.extend_from_slice(&frame[idx * c..(idx + 1) * c]);
            }
        }
    }
    ClipFeatures::new(Tensor::new(vec![t, n, 4 * c], out)?)
}

/// Inverse of [`merge_adjacent_tokens`].
pub fn split_merged_tokens(f: &ClipFeatures, layout: MergeLayout) -> Result<RawFrameFeatures> {
    let (t, n, cc) = (f.frames(), f.tokens(), f.channels());
    if cc % 4 != 0 {
        return Err(Error::invalid(format!("channel count {cc} is not divisible by 4")));
    }
    let (n0, c) = (4 * n, cc / 4);
    let src = f.0.data();
    let mut out = vec![0.0; src.len()];
    for fr in 0..t {
        for g in 0..n {
            let merged = &src[(fr * n + g) * cc..(fr * n + g + 1) * cc];
            for (part, idx) in merge_group(layout, n0, g)?.into_iter().enumerate() {
                let dst = (fr * n0 + idx) * c;
                out[dst..dst + c].copy_from_slice(&merged[part * c..(part + 1) * c]);
            }
        }
    }
    RawFrameFeatures::new(Tensor::new(vec![t, n0, c], out)?)
}

/// Summarization tokens `S` (`(T·P) x C`) and the global token `Ŝ`
/// (`1 x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct SummarizationTokens {
    pub tokens: Tensor,
    pub global: Tensor,
    pub per_frame: usize,
}

/// Pools each frame's `N` tokens into `P`; `Ŝ` is the mean over the first
/// `valid_frames` frames.
pub fn init_summarization(f: &ClipFeatures, p: usize, valid_frames: usize) -> Result<SummarizationTokens> {
    let (t, n, c) = (f.frames(), f.tokens(), f.channels());
    if p == 0 || p >= n {
        return Err(Error::invalid(format!("summarization count P = {p} must satisfy 1 <= P < N = {n}")));
    }
    if valid_frames == 0 || valid_frames > t {
        return Err(Error::invalid(format!("{valid_frames} valid frames of {t}")));
    }
    let mut rows = Vec::with_capacity(t * p * c);
    for fr in 0..t {
        rows.extend(adaptive_avg_pool(&f.frame(fr), p)?.into_data());
    }
    let tokens = Tensor::new(vec![t * p, c], rows)?;
    let valid = &f.0.data()[..valid_frames * n * c];
    let mut global = vec![0.0; c];
    for tok in valid.chunks(c) {
        for (g, v) in global.iter_mut().zip(tok) {
            *g += v;
        }
    }
    let count = (valid_frames * n) as f64;
    global.iter_mut().for_each(|g| *g /= count);
    Ok(SummarizationTokens {
        tokens,
        global: Tensor::new(vec![1, c], global)?,
        per_frame: p,
    })
}

/// Span lengths of a single-clip training sequence: features, then
/// summarization tokens, then text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefixMaskSpec {
    pub feature: usize,
    pub summarization: usize,
    pub text: usize,
}

impl PrefixMaskSpec {
    pub fn total(&self) -> usize {
        self.feature + self.summarization + self.text
    }
}

/// Causal mask in which text rows cannot see the feature span, so every
/// piece of clip information reaching the text passes through the
/// summarization tokens.
pub fn build_prefix_mask(spec: PrefixMaskSpec) -> Result<AttentionMask> {
    let mut m = AttentionMask::causal(spec.total())?;
    let text_start = spec.feature + spec.summarization;
    for i in text_start..spec.total() {
        for j in 0..spec.feature {
            m.block(i, j)?;
        }
    }
    Ok(m)
}

/// Projector from feature space into the encoder LM.
#[derive(Clone, Debug)]
pub struct ClipEncoder {
    pub projector: Projector,
    pub lm: MiniLm,
}

/// A single-clip sequence built on a tape, with the span layout needed to
/// read results back.
pub struct ClipSequence {
    pub seq: PackedSequence,
    pub spec: PrefixMaskSpec,
}

impl ClipEncoder {
    /// Projects `F ∘ S` (and any extra feature-space rows) in one pass.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, rows: Tensor) -> Result<Var> {
        if rows.cols() != self.projector.input_dim() {
            return Err(Error::shape(
                "projector",
                format!("features of width {} for projector input {}", rows.cols(), self.projector.input_dim()),
            ));
        }
        let x = tape.constant(rows);
        self.projector.forward(tape, store, x)
    }

    /// Packs `[project(F) ∘ project(S) ∘ text]`.
    pub fn clip_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: &ClipFeatures,
        s: &SummarizationTokens,
        text: &[usize],
    ) -> Result<ClipSequence> {
        let fm = f.as_matrix();
        let (tn, tp) = (fm.rows(), s.tokens.rows());
        let both = Tensor::concat_rows(&[&fm, &s.tokens])?;
        let projected = self.project(tape, store, both)?;
        let feats = tape.slice_rows(projected, 0, tn)?;
        let summ = tape.slice_rows(projected, tn, tp)?;
        let seq = PackedSequence::new()
            .vectors(Role::ClipFeatures, vec![feats])
            .vectors(Role::Summarization, vec![summ])
            .tokens(Role::Text, text.to_vec());
        Ok(ClipSequence {
            seq,
            spec: PrefixMaskSpec {
                feature: tn,
                summarization: tp,
                text: text.len(),
            },
        })
    }

    /// Condensed representation `H` (`(T·P) x D`): tap-layer outputs of the
    /// summarization span under the causal mask.
    pub fn encode_clip(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f: &ClipFeatures,
        s: &SummarizationTokens,
    ) -> Result<Var> {
        let cs = self.clip_sequence(tape, store, f, s, &[])?;
        let mask = Arc::new(AttentionMask::causal(cs.spec.total())?);
        let out = self.lm.forward(tape, store, &cs.seq, &mask, Depth::Tap)?;
        tape.slice_rows(out.hidden_at_tap, cs.spec.feature, cs.spec.summarization)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn merging_four_tokens_concatenates_channels() {
        let raw = RawFrameFeatures::new(Tensor::new(vec![1, 4, 2], (0..8).map(f64::from).collect()).unwrap()).unwrap();
        let f = merge_adjacent_tokens(&raw, MergeLayout::Consecutive).unwrap();
        assert_eq!(f.0.shape(), &[1, 1, 8]);
        assert_eq!(f.0.data(), raw.0.data());
    }

    #[test]
    fn paper_scale_merge_shape() {
        let raw = RawFrameFeatures::new(Tensor::zeros(&[1, 256, 1024])).unwrap();
        let f = merge_adjacent_tokens(&raw, MergeLayout::Consecutive).unwrap();
        assert_eq!((f.tokens(), f.channels()), (64, 4096));
    }

    #[test]
    fn merge_split_round_trip_both_layouts() {
        let raw = RawFrameFeatures::new(random(&[3, 16, 5], 1)).unwrap();
        for layout in [MergeLayout::Consecutive, MergeLayout::Grid2x2 { width: 4 }] {
            let f = merge_adjacent_tokens(&raw, layout).unwrap();
            assert!(split_merged_tokens(&f, layout).unwrap().0.bit_eq(&raw.0));
        }
        let bad = RawFrameFeatures::new(Tensor::zeros(&[1, 6, 2])).unwrap();
        assert!(merge_adjacent_tokens(&bad, MergeLayout::Consecutive).is_err());
    }

    #[test]
    fn grid_layout_takes_two_by_two_windows() {
        let raw = RawFrameFeatures::new(Tensor::new(vec![1, 8, 1], (0..8).map(f64::from).collect()).unwrap()).unwrap();
        let f = merge_adjacent_tokens(&raw, MergeLayout::Grid2x2 { width: 4 }).unwrap();
        assert_eq!(f.0.data(), &[0., 1., 4., 5., 2., 3., 6., 7.]);
    }

    #[test]
    fn summarization_examples() {
        let f = ClipFeatures::new(random(&[2, 4, 3], 2)).unwrap();
        let s = init_summarization(&f, 1, 2).unwrap();
        for fr in 0..2 {
            for c in 0..3 {
                let mean = (0..4).map(|n| f.0.data()[(fr * 4 + n) * 3 + c]).sum::<f64>() / 4.0;
                assert!((s.tokens.row(fr)[c] - mean).abs() < 1e-15);
            }
        }
        let constant = ClipFeatures::new(Tensor::full(&[2, 4, 3], 0.75)).unwrap();
        let s = init_summarization(&constant, 2, 2).unwrap();
        assert!(s.tokens.data().iter().chain(s.global.data()).all(|v| *v == 0.75));
        assert!(init_summarization(&f, 4, 2).is_err());
        assert!(init_summarization(&f, 0, 2).is_err());
    }

    #[test]
    fn global_token_skips_padded_frames() {
        let mut data = vec![1.0; 4 * 3];
        data.extend(vec![9.0; 4 * 3]);
        let f = ClipFeatures::new(Tensor::new(vec![2, 4, 3], data).unwrap()).unwrap();
        let s = init_summarization(&f, 2, 1).unwrap();
        assert_eq!(s.global.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn prefix_mask_rule() {
        let spec = PrefixMaskSpec { feature: 2, summarization: 1, text: 1 };
        let m = build_prefix_mask(spec).unwrap();
        assert_eq!(m.to_rows()[3], vec![0, 0, 1, 1]);
        let plain = PrefixMaskSpec { feature: 3, summarization: 2, text: 0 };
        assert_eq!(build_prefix_mask(plain).unwrap(), AttentionMask::causal(5).unwrap());
        let spec = PrefixMaskSpec { feature: 5, summarization: 3, text: 4 };
        let m = build_prefix_mask(spec).unwrap();
        for (k, i) in (8..12).enumerate() {
            assert_eq!(m.row_count(i), 3 + k + 1);
        }
        for i in 0..8 {
            assert_eq!(m.row_count(i), i + 1);
        }
    }
}
