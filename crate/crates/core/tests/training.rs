use streammem::config::RunConfig;
use streammem::eval::{evaluate, EvalOptions};
use streammem::model::{ModelConfig, StreamModel};
use streammem::pipeline::{test_split, train_split};
use streammem::synth::SynthConfig;
use streammem::train::{caption_samples, prepare_videos, train_stage1, train_stage2, EpochLog, LossWeights, Stage, TrainPlan};

fn plan(stage: Stage, learning_rate: f64, epochs: usize, batch: usize) -> TrainPlan {
    TrainPlan {
        stage,
        learning_rate,
        epochs,
        weights: LossWeights::default(),
        use_labels: true,
        batch,
        seed: 3,
    }
}

#[test]
fn stage1_overfits_a_single_batch() {
    let mut model = StreamModel::new(ModelConfig::default(), 8).unwrap();
    let data = caption_samples(&SynthConfig::default(), &model, 4, 12).unwrap();
    let mut losses = Vec::new();
    let p = plan(Stage::ClipInstruct, 1e-3, 500, 4);
    train_stage1(&mut model, &p, &data, &mut |e: &EpochLog, _: &StreamModel| losses.push(e.mean_loss)).unwrap();
    let first_below = losses.iter().position(|&l| l < 0.05);
    assert!(first_below.is_some(), "final loss {:?}", losses.last());
    assert!(losses[0] > 1.0);
}

/// Mean IoP on held-out labeled streams after each of the first three
/// warm-up epochs.
#[test]
fn warmup_selection_improves_each_epoch() {
    let cfg = RunConfig::default()
        .with_overrides(&[
            "synth.num_clips=8".into(),
            "synth.max_events=2".into(),
            "data.train_questions=240".into(),
            "data.test_questions=80".into(),
        ])
        .unwrap();
    let mut model = StreamModel::new(cfg.model.clone(), cfg.seeds.init).unwrap();
    let train = prepare_videos(&model, &train_split(&cfg).unwrap(), |_, _| true).unwrap();
    let test = test_split(&cfg).unwrap();
    let score = |m: &StreamModel| evaluate(m, &test, &EvalOptions::default()).unwrap().1.overall.mean_iop;
    let mut curve = vec![score(&model)];
    let p = plan(Stage::Warmup, 1e-3, 3, 1);
    train_stage2(&mut model, &p, &train, &mut |_: &EpochLog, m: &StreamModel| curve.push(score(m))).unwrap();
    assert_eq!(curve.len(), 4);
    assert!(curve.windows(2).all(|w| w[1] >= w[0]), "{curve:?}");
    assert!(curve[3] > curve[0] + 0.1, "{curve:?}");
}
