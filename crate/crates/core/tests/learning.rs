//! Training-loop behaviour on small synthetic data.

use dcn::checkpoint::load_checkpoint;
use dcn::data::{synth_scene, RasterStack, SyntheticSceneSpec};
use dcn::model::{DcnConfig, DcnModel};
use dcn::optim::{AdamParams, AdamState};
use dcn::pipeline::{dataset_norm, predict_scene, prepare_samples, PipelineConfig, Sample};
use dcn::train::{train, TrainConfig};

fn harness(seeds: std::ops::Range<u64>, size: usize) -> (PipelineConfig, Vec<Sample>) {
    let stacks: Vec<RasterStack> = seeds.map(|s| synth_scene(&SyntheticSceneSpec::new(size, size, s)).unwrap().stack).collect();
    let mut pc = PipelineConfig { window: size, stride: size, ..PipelineConfig::default() };
    pc.norm = dataset_norm(&stacks, &pc.bands).unwrap();
    let samples = stacks.iter().flat_map(|s| prepare_samples(s, &pc).unwrap()).collect();
    (pc, samples)
}

fn fresh(tile: usize) -> (DcnModel<f32>, AdamState<f32>) {
    let model = DcnModel::<f32>::build(DcnConfig::reduced(tile)).unwrap();
    let opt = AdamState::new(AdamParams::default(), model.params().into_iter().map(|(_, t)| t.shape()));
    (model, opt)
}

#[test]
fn smoothed_loss_descends_over_the_first_twenty_epochs() {
    let (_, set) = harness(100..108, 64);
    let (mut model, mut opt) = fresh(64);
    let config = TrainConfig { batch_size: 2, epochs: 20, seed: 1, ..TrainConfig::default() };
    let report = train(&mut model, &mut opt, &set, &[], &config).unwrap();
    let losses = report.losses();
    let smoothed: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (i, pair) in smoothed.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "smoothed loss rose at window {i}: {losses:?}");
    }
    let epochs: Vec<usize> = report.history.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (1..=20).collect::<Vec<_>>());
    assert_eq!(report.cost.ne, 20);
}

#[test]
fn checkpoints_are_written_on_schedule() {
    let (_, set) = harness(0..2, 32);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.dcnw");
    let (mut model, mut opt) = fresh(32);
    let config = TrainConfig {
        batch_size: 1,
        epochs: 3,
        checkpoint_every: Some(2),
        checkpoint_path: Some(path.clone()),
        ..TrainConfig::default()
    };
    train(&mut model, &mut opt, &set, &[], &config).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    // Written after epoch 2 of 3, with one window per step.
    assert_eq!(ck.step, 2 * set.len() as u64);
    assert_eq!(ck.optimizer.unwrap().t, ck.step);
}

#[test]
fn patience_stops_training_early() {
    let (_, set) = harness(0..2, 32);
    let (mut model, mut opt) = fresh(32);
    // Without learning, only the running statistics move, and they settle.
    opt.params.lr = 0.0;
    let config = TrainConfig { batch_size: 2, epochs: 50, patience: Some(3), ..TrainConfig::default() };
    let report = train(&mut model, &mut opt, &set, &set, &config).unwrap();
    let ious: Vec<f64> = report.history.iter().map(|r| r.val_iou.unwrap()).collect();
    assert!(ious.len() < 50, "{ious:?}");
    let best = ious[..ious.len() - 3].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(ious[ious.len() - 3..].iter().all(|&v| v <= best), "{ious:?}");
}

#[test]
fn scene_prediction_has_the_scene_size() {
    let scene = synth_scene(&SyntheticSceneSpec::new(96, 64, 3)).unwrap().stack;
    let mut pc = PipelineConfig { window: 32, stride: 32, ..PipelineConfig::default() };
    pc.norm = dataset_norm(std::slice::from_ref(&scene), &pc.bands).unwrap();
    let (model, _) = fresh(32);
    let pred = predict_scene(&model, &scene, &pc, 4).unwrap();
    assert_eq!((pred.width(), pred.height()), (96, 64));
    let mask = pred.band(dcn::data::BandRole::Mask).unwrap();
    assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
}
