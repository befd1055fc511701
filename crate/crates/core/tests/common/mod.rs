//! Shared oracles for integration and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streammem::lm::LmConfig;
use streammem::model::{ModelConfig, ReaderConfig, SelectionConfig, StreamModel};
use streammem::streaming::TimePromptMode;
use streammem::synth::{gen_sample, SynthConfig};
use streammem::tokenizer::vocab_size;
use streammem::train::{prepare_videos, video_loss, LossWeights, Stage, TrainPlan};
use streammem::{ParamId, Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor, so near-zero pairs are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with a floor for near-zero pairs.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Scalar `Σ w ⊙ f(inputs)` with fixed random weights so every output
/// element contributes a distinct gradient.
fn reduced(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Largest relative error between tape gradients and central differences
/// over every coordinate of every input.
pub fn gradcheck<F>(inputs: &[Tensor], relaxed: bool, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = if relaxed { Tape::relaxed() } else { Tape::new() };
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = reduced(&mut tape, out, 0x5eed).unwrap();
        let value = tape.value(loss).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        num_clips: 3,
        frames_per_clip: 2,
        raw_tokens: 16,
        raw_channels: 4,
        event_clips: 1,
        min_events: 1,
        max_events: 2,
        ..SynthConfig::default()
    }
}

pub fn tiny_model_config() -> ModelConfig {
    let lm = LmConfig {
        vocab_size: vocab_size(),
        model_dim: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        max_sequence_length: 96,
        tap_layer: 1,
    };
    ModelConfig {
        feature_channels: 16,
        tokens_per_frame: 4,
        frames_per_clip: 2,
        summarization_per_frame: 1,
        time_prompts: TimePromptMode::ClipAndMemory,
        use_memory: true,
        merge_layout: Default::default(),
        encoder: lm.clone(),
        reader: ReaderConfig { lm, projector_hidden: None },
        selection: SelectionConfig { top_v: 2, ..ModelConfig::default().selection },
    }
}

/// Stage-2 loss (next-token plus grounding KL) of one tiny stream checked
/// against central differences on `probes` parameter coordinates spread
/// over every parameter tensor. The straight-through node forwards its
/// soft input so the estimator is the exact gradient of what is recorded.
pub fn stage2_composite_check(probes_per_param: usize, seed: u64) -> (f64, usize) {
    let mut model = StreamModel::new(tiny_model_config(), seed).unwrap();
    let sample = gen_sample(&tiny_synth(), seed).unwrap();
    let video = prepare_videos(&model, &[sample], |_, _| true).unwrap().remove(0);
    let plan = TrainPlan {
        stage: Stage::Warmup,
        learning_rate: 1e-3,
        epochs: 1,
        weights: LossWeights::default(),
        use_labels: true,
        batch: 1,
        seed,
    };
    let loss_of = |m: &StreamModel| -> f64 {
        let mut tape = Tape::relaxed();
        let l = video_loss(m, &mut tape, &video, &plan, seed).unwrap().unwrap();
        tape.value(l).data()[0]
    };
    let mut tape = Tape::relaxed();
    let l = video_loss(&model, &mut tape, &video, &plan, seed).unwrap().unwrap();
    tape.backward(l).unwrap();
    model.store.zero_grads();
    tape.accumulate_param_grads(&mut model.store);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let n = model.store.value(id).len();
        for _ in 0..probes_per_param.min(n) {
            let j = rng.random_range(0..n);
            let analytic = model.store.grad(id).data()[j];
            let orig = model.store.value(id).data()[j];
            model.store.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&model);
            model.store.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&model);
            model.store.value_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Every differentiable tape op, each as `(name, max relative error)`.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    use std::sync::Arc;
    use streammem::AttentionMask;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape);
    let a = r(&[3, 4]);
    let b = r(&[4, 5]);
    let c = r(&[3, 4]);
    let bt = r(&[5, 4]);
    let bias = r(&[4]);
    let gamma = r(&[4]);
    let beta = r(&[4]);
    let q = r(&[5, 4]);
    let k = r(&[5, 4]);
    let v = r(&[5, 4]);
    let table = r(&[6, 3]);
    let logits = r(&[4, 6]);
    let seq = r(&[7, 3]);
    let query = r(&[3]);
    let keys = r(&[4, 3]);
    let weights = r(&[3]);
    let soft = r(&[1, 4]);
    let mask = {
        let mut m = AttentionMask::causal(5).unwrap();
        m.block(4, 1).unwrap();
        m.block(3, 0).unwrap();
        Arc::new(m)
    };
    let kl_target = Tensor::new(vec![4], vec![0.5, 0.0, 0.5, 0.0]).unwrap();

    vec![
        ("matmul", gradcheck(&[a.clone(), b.clone()], false, |t, x| t.matmul(x[0], x[1]))),
        ("matmul_trans_b", gradcheck(&[a.clone(), bt], false, |t, x| t.matmul_ext(x[0], x[1], true))),
        ("add", gradcheck(&[a.clone(), c.clone()], false, |t, x| t.add(x[0], x[1]))),
        ("sub", gradcheck(&[a.clone(), c.clone()], false, |t, x| t.sub(x[0], x[1]))),
        ("mul", gradcheck(&[a.clone(), c.clone()], false, |t, x| t.mul(x[0], x[1]))),
        ("add_bias", gradcheck(&[a.clone(), bias], false, |t, x| t.add_bias(x[0], x[1]))),
        ("scale", gradcheck(&[a.clone()], false, |t, x| t.scale(x[0], -1.7))),
        ("gelu", gradcheck(&[a.clone()], false, |t, x| t.gelu(x[0]))),
        ("layer_norm", gradcheck(&[a.clone(), gamma, beta], false, |t, x| t.layer_norm(x[0], x[1], x[2]))),
        ("softmax", gradcheck(&[a.clone()], false, |t, x| t.softmax(x[0]))),
        (
            "attention",
            gradcheck(&[q, k, v], false, move |t, x| t.attention(x[0], x[1], x[2], 2, mask.clone())),
        ),
        ("embedding", gradcheck(&[table], false, |t, x| t.embedding(x[0], &[0, 3, 3, 5]))),
        ("concat_rows", gradcheck(&[a.clone(), c.clone()], false, |t, x| t.concat_rows(&[x[0], x[1]]))),
        ("slice_rows", gradcheck(&[seq.clone()], false, |t, x| t.slice_rows(x[0], 2, 3))),
        ("transpose", gradcheck(&[a.clone()], false, |t, x| t.transpose(x[0]))),
        ("reshape", gradcheck(&[a.clone()], false, |t, x| t.reshape(x[0], vec![2, 6]))),
        ("sum", gradcheck(&[a.clone()], false, |t, x| t.sum(x[0]))),
        ("mean", gradcheck(&[a.clone()], false, |t, x| t.mean(x[0]))),
        (
            "cross_entropy",
            gradcheck(&[logits], false, |t, x| t.cross_entropy(x[0], &[Some(1), None, Some(5), Some(0)])),
        ),
        (
            "kl_divergence",
            gradcheck(&[soft.clone()], false, move |t, x| {
                let p = t.softmax(x[0])?;
                t.kl_divergence(p, &kl_target)
            }),
        ),
        ("adaptive_avg_pool", gradcheck(&[seq], false, |t, x| t.adaptive_avg_pool(x[0], 3))),
        (
            "straight_through",
            gradcheck(&[soft], true, |t, x| {
                let p = t.softmax(x[0])?;
                t.straight_through(p, Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0])?)
            }),
        ),
        (
            "scale_by_element",
            gradcheck(&[a, weights], false, |t, x| t.scale_by_element(x[0], x[1], 1)),
        ),
        ("cosine", gradcheck(&[query, keys], false, |t, x| t.cosine(x[0], x[1]))),
    ]
}
