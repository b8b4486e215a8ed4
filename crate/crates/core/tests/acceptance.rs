//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the test
//! fails if any criterion does.
//!
//! The lines go straight to stdout, so they show even when output is captured.
//! Set `ACCEPTANCE_ONLY=1,4` to run a subset.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use dcn::autodiff::{grad_check, relative_error, Tape, Var};
use dcn::checkpoint::{decode, encode, Checkpoint};
use dcn::competition::{class_distances, softmin_probs, winner, Codebook, CompetitionConfig, DistanceForm};
use dcn::data::{
    decode_bmsr, encode_bmsr, split_dataset, stitch, synth_scene, tile, BandRole, RasterStack, SplitSpec,
    SyntheticScene, SyntheticSceneSpec,
};
use dcn::layers::{logistic, BatchNormForm, Phase, SigmoidForm};
use dcn::metrics::{computational_cost, confusion, error_map, iou, overall_accuracy, ConfusionCounts, BLACK, BLUE, RED, WHITE};
use dcn::model::{DcnConfig, DcnModel};
use dcn::optim::{AdamParams, AdamState};
use dcn::pipeline::{dataset_norm, predict_samples, prepare_samples, PipelineConfig, Sample};
use dcn::superpixel::{boundary_recall, connected_components, slic_segment, SlicParams, SuperpixelMap};
use dcn::train::{evaluate, train, MetricsDocument, TrainConfig};
use dcn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(id: usize, name: &str, f: fn() -> Outcome) -> bool {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    let line = match &result {
        Ok(detail) => format!("PASS {id} {name}: {detail} ({secs:.1}s)"),
        Err(detail) => format!("FAIL {id} {name}: {detail} ({secs:.1}s)"),
    };
    // Bypasses the test harness capture on purpose.
    writeln!(std::io::stdout().lock(), "{line}").unwrap();
    result.is_ok()
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("metric oracle", metric_oracle),
        ("competition equivalence", competition_equivalence),
        ("SLIC properties", slic_properties),
        ("overfit harness", overfit_harness),
        ("generalization smoke", generalization_smoke),
        ("protocol fidelity", protocol_fidelity),
        ("cost formula", cost_formula),
        ("determinism and formats", determinism_and_formats),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        if !run(i + 1, name, f) {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// ── 1. gradients ─────────────────────────────────────────────────────

const TRIALS: u64 = 100;
const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduces an op output to a scalar with fixed random weights so every
/// output element contributes a distinct amount.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> dcn::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.leaf(Tensor::uniform(&shape, 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> dcn::Result<Var>>)>;

fn op_cases() -> Vec<(&'static str, OpCase)> {
    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
        (rng.gen_range(1..3), 2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4), rng.gen_range(1..4))
    }
    let mut cases: Vec<(&'static str, OpCase)> = Vec::new();
    cases.push(("add", Box::new(|rng| {
        let s = [3, 4];
        (vec![randn(&s, rng), randn(&s, rng)], Box::new(|t, v| { let y = t.add(v[0], v[1])?; project(t, y, 1) }))
    })));
    cases.push(("sub", Box::new(|rng| {
        let s = [4, 3];
        (vec![randn(&s, rng), randn(&s, rng)], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, 2) }))
    })));
    cases.push(("mul", Box::new(|rng| {
        let s = [2, 5];
        (vec![randn(&s, rng), randn(&s, rng)], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 3) }))
    })));
    cases.push(("scale", Box::new(|rng| {
        let c: f64 = rng.gen_range(-2.0..2.0);
        (vec![randn(&[6], rng)], Box::new(move |t, v| { let y = t.scale(v[0], c)?; project(t, y, 4) }))
    })));
    cases.push(("sum", Box::new(|rng| (vec![randn(&[2, 3, 2], rng)], Box::new(|t, v| t.sum(v[0]))))));
    cases.push(("relu", Box::new(|rng| {
        (vec![randn(&[3, 5], rng)], Box::new(|t, v| { let y = t.relu(v[0])?; project(t, y, 5) }))
    })));
    for (name, form) in [("sigmoid standard", SigmoidForm::Standard), ("sigmoid literal", SigmoidForm::Literal)] {
        cases.push((name, Box::new(move |rng| {
            (vec![randn(&[4, 3], rng)], Box::new(move |t, v| { let y = t.sigmoid(v[0], form)?; project(t, y, 6) }))
        })));
    }
    cases.push(("conv2d", Box::new(|rng| {
        let (n, h, w, ci) = dims(rng);
        let co = rng.gen_range(1..4);
        (
            vec![randn(&[n, h, w, ci], rng), randn(&[3, 3, ci, co], rng), randn(&[co], rng)],
            Box::new(|t, v| { let y = t.conv2d(v[0], v[1], v[2])?; project(t, y, 7) }),
        )
    })));
    cases.push(("maxpool2", Box::new(|rng| {
        let (n, h, w, c) = dims(rng);
        (vec![randn(&[n, h, w, c], rng)], Box::new(|t, v| { let y = t.maxpool2(v[0])?; project(t, y, 8) }))
    })));
    cases.push(("upsample_nearest2", Box::new(|rng| {
        let (n, h, w, c) = dims(rng);
        (vec![randn(&[n, h / 2, w / 2, c], rng)], Box::new(|t, v| { let y = t.upsample_nearest2(v[0])?; project(t, y, 9) }))
    })));
    for (name, form) in [("batch_norm standard", BatchNormForm::Standard), ("batch_norm literal", BatchNormForm::Literal)] {
        cases.push((name, Box::new(move |rng| {
            let (n, h, w, c) = dims(rng);
            (
                vec![randn(&[n, h, w, c], rng), randn(&[c], rng), randn(&[c], rng)],
                Box::new(move |t, v| {
                    let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5, form)?;
                    project(t, y, 10)
                }),
            )
        })));
    }
    cases.push(("channel_affine", Box::new(|rng| {
        let scale: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let shift: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (
            vec![randn(&[2, 2, 3], rng)],
            Box::new(move |t, v| { let y = t.channel_affine(v[0], scale.clone(), shift.clone())?; project(t, y, 11) }),
        )
    })));
    cases.push(("dropout", Box::new(|rng| {
        let seed = rng.gen();
        (vec![randn(&[4, 4], rng)], Box::new(move |t, v| { let y = t.dropout(v[0], 0.5, seed)?; project(t, y, 12) }))
    })));
    cases.push(("segment_mean", Box::new(|rng| {
        let rows = rng.gen_range(1..4);
        let mut rows_of: Vec<usize> = (0..rows).collect();
        rows_of.extend((0..6).map(|_| rng.gen_range(0..rows)));
        let pixels = rows_of.len();
        (
            vec![randn(&[pixels, 2], rng)],
            Box::new(move |t, v| { let y = t.segment_mean(v[0], rows_of.clone(), rows)?; project(t, y, 13) }),
        )
    })));
    for (name, form) in [
        ("class_distances activated", DistanceForm::ActivatedDifference),
        ("class_distances literal", DistanceForm::DifferenceActivated),
    ] {
        cases.push((name, Box::new(move |rng| {
            let config = CompetitionConfig { form, sigmoid: SigmoidForm::Standard };
            (
                vec![randn(&[3, 4], rng), Tensor::uniform(&[2, 4], 0.0, 1.0, rng)],
                Box::new(move |t, v| { let y = t.class_distances(v[0], v[1], config)?; project(t, y, 14) }),
            )
        })));
    }
    cases.push(("softmin_cross_entropy", Box::new(|rng| {
        let truth: Vec<u8> = (0..5).map(|_| rng.gen_range(0..2)).collect();
        let weights: Vec<f64> = (0..5).map(|_| rng.gen_range(1.0..10.0)).collect();
        (
            vec![Tensor::uniform(&[5, 2], 0.0, 2.0, rng)],
            Box::new(move |t, v| t.softmin_cross_entropy(v[0], &truth, Some(&weights))),
        )
    })));
    cases
}

fn model_gradient_check() -> Result<f64, String> {
    let config = DcnConfig { input_channels: 3, seed: 11, ..DcnConfig::reduced(32) };
    let mut model = DcnModel::<f32>::build(config).map_err(|e| e.to_string())?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // Running statistics away from their initial values.
    for t in model.buffers_mut() {
        *t = Tensor::uniform(t.shape(), 0.5, 1.5, &mut rng);
    }
    let input = Tensor::uniform(&[2, 32, 32, 3], 0.0, 1.0, &mut rng);
    let blocks: Vec<u32> = (0..1024).map(|p| ((p / 32) / 8 * 4 + (p % 32) / 8) as u32).collect();
    let map = SuperpixelMap::from_labels(32, 32, blocks).unwrap();
    let maps = [&map, &map];
    let truth: Vec<u8> = (0..32).map(|_| rng.gen_range(0..2)).collect();
    let weights = vec![64.0; 32];

    let loss = |m: &DcnModel<f64>, phase: Phase, tape: &mut Tape<f64>| -> dcn::Result<(Var, Vec<Var>)> {
        let params = m.param_leaves(tape, true);
        let x = tape.leaf(input.clone());
        let fw = m.forward_on_tape(tape, &params, x, &maps, phase, 0)?;
        Ok((tape.softmin_cross_entropy(fw.distances, &truth, Some(&weights))?, params))
    };
    let mut worst: f64 = 0.0;
    for phase in [Phase::Train, Phase::Infer] {
        let mut tape = Tape::new();
        let (l, params) = loss(&model, phase, &mut tape).map_err(|e| e.to_string())?;
        let mut grads = tape.backward(l).map_err(|e| e.to_string())?;
        let analytic: Vec<Tensor<f64>> = params.iter().map(|&p| grads.take(p).unwrap()).collect();
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        for (k, a) in analytic.iter().enumerate() {
            for _ in 0..2 {
                let i = rng.gen_range(0..a.len());
                let eval = |delta: f64| -> f64 {
                    let mut m = model.clone();
                    m.params_mut()[k].data_mut()[i] += delta;
                    let mut tape = Tape::new();
                    let (l, _) = loss(&m, phase, &mut tape).unwrap();
                    tape.value(l).data()[0]
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                let analytic = a.data()[i];
                // Conv biases feeding a training-mode batch norm have an
                // exactly zero gradient; compare them absolutely.
                let e = if analytic.abs().max(numeric.abs()) < 1e-8 {
                    (analytic - numeric).abs()
                } else {
                    relative_error(analytic, numeric)
                };
                if e >= MODEL_TOL {
                    return Err(format!("{phase:?} {}[{i}]: analytic {analytic:e} numeric {numeric:e}", names[k]));
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let cases = op_cases();
    for (name, case) in &cases {
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let (inputs, f) = case(&mut rng);
            let report = grad_check(|t: &mut Tape<f64>, v: &[Var]| f(t, v), &inputs, FD_STEP, LAYER_TOL)
                .map_err(|e| format!("{name} trial {trial}: {e}"))?;
            ensure(
                report.passed,
                format!("{name} trial {trial}: max relative error {:e}", report.max_rel_error),
            )?;
            worst = worst.max(report.max_rel_error);
        }
    }
    let model = model_gradient_check()?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "{} ops x {TRIALS} trials, worst layer error {worst:.1e} (< {LAYER_TOL:e}); reduced model 32x32 worst {model:.1e} (< {MODEL_TOL:e})",
        cases.len()
    ))
}

// ── 2. metrics ───────────────────────────────────────────────────────

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for pair in 0..100 {
        let density: f64 = rng.gen_range(0.0..1.0);
        let pred: Vec<u8> = (0..4096).map(|_| u8::from(rng.gen_bool(density))).collect();
        let truth: Vec<u8> = (0..4096).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..4096 {
            match (pred[i], truth[i]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
        let c = confusion(&pred, &truth).map_err(|e| e.to_string())?;
        ensure(c == ConfusionCounts::new(tp, fp, fn_, tn), format!("pair {pair}: counts {c:?}"))?;
        let oa = (tp + tn) as f64 / 4096.0;
        let j = tp as f64 / ((tp + fp + fn_) as f64 + 1e-15);
        ensure(overall_accuracy(&c).unwrap() == oa, format!("pair {pair}: OA"))?;
        ensure(iou(&c) == j, format!("pair {pair}: IoU"))?;
    }
    let worked = ConfusionCounts::new(3, 2, 1, 4);
    let (oa, j) = (overall_accuracy(&worked).unwrap(), iou(&worked));
    ensure(oa == 0.7, format!("worked OA {oa}"))?;
    ensure((j - 0.5).abs() <= 1e-15, format!("worked IoU {j}"))?;
    Ok(format!("100 random 64x64 pairs exact; (3,2,1,4): OA {oa}, IoU {j}"))
}

// ── 3. competition ───────────────────────────────────────────────────

/// Winner computed straight from `n = argmin_i |1/2 sum f(I - O)^2|`.
fn oracle_winner(x: &[f64], w: &[f64], form: DistanceForm) -> usize {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let d: Vec<f64> = (0..2)
        .map(|i| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(j, &xj)| {
                    let wij = w[i * x.len() + j];
                    match form {
                        DistanceForm::ActivatedDifference => (sig(xj) - wij).powi(2),
                        DistanceForm::DifferenceActivated => sig(xj - wij).powi(2),
                    }
                })
                .sum();
            (0.5 * s).abs()
        })
        .collect();
    usize::from(d[1] < d[0])
}

fn competition_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut disagreements = 0;
    for trial in 0..10_000 {
        let form = if trial % 2 == 0 { DistanceForm::ActivatedDifference } else { DistanceForm::DifferenceActivated };
        let config = CompetitionConfig { form, sigmoid: SigmoidForm::Standard };
        let dim = rng.gen_range(1..9);
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let cb = Codebook::new(Tensor::uniform(&[2, dim], 0.0, 1.0, &mut rng)).unwrap();
        let d = class_distances(&x, &cb, config).map_err(|e| e.to_string())?;
        let n = winner(d).map_err(|e| e.to_string())?;
        let p = softmin_probs(d);
        let argmax = usize::from(p[1] > p[0]);
        let tie = (d[0] - d[1]).abs() < 1e-12;
        if n != argmax || (!tie && n != oracle_winner(&x, cb.prototypes.data(), form)) {
            disagreements += 1;
        }
    }
    ensure(disagreements == 0, format!("{disagreements} of 10000 random pairs disagree"))?;

    let mut ties = 0;
    for k in 0..1000 {
        let base: f64 = rng.gen_range(0.0..5.0);
        let gap = (k % 5) as f64 * 1e-12;
        for d in [[base, base + gap], [base + gap, base]] {
            let n = winner(d).unwrap();
            let p = softmin_probs(d);
            ensure(n == usize::from(p[1] > p[0]), format!("near tie {d:?}"))?;
            let expected = usize::from(d[1] < d[0]);
            ensure(n == expected, format!("tie rule at {d:?}"))?;
            ties += 1;
        }
    }

    let config = CompetitionConfig::default();
    for _ in 0..1000 {
        let dim = rng.gen_range(1..9);
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let act: Vec<f64> = x.iter().map(|&v| logistic(v, SigmoidForm::Standard)).collect();
        let mut rows = act.clone();
        rows.extend(act.iter().map(|&a| (a + 0.25).min(1.0) - 0.125));
        let cb = Codebook::new(Tensor::new(&[2, dim], rows).unwrap()).unwrap();
        let d = class_distances(&x, &cb, config).unwrap();
        ensure(d[0] == 0.0, format!("matching prototype gives {}", d[0]))?;
        ensure(d[1] > 0.0, "distinct prototype gives zero")?;
    }
    Ok(format!("10000 random pairs and {ties} near ties agree; activated distance is 0 exactly at the prototype"))
}

// ── 4. SLIC ──────────────────────────────────────────────────────────

/// A scene of overlapping axis-aligned rectangles with well separated
/// colors, plus mild noise. Returns features and the rectangle labels.
fn rectangle_scene(size: usize, seed: u64) -> (Tensor<f64>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors: Vec<[f64; 3]> = vec![[50.0, 50.0, 50.0]];
    while colors.len() < 8 {
        let c = [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)];
        let far = colors.iter().all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() > 30.0);
        if far {
            colors.push(c);
        }
    }
    let mut labels = vec![0u32; size * size];
    for id in 1..colors.len() as u32 {
        let (w, h) = (rng.gen_range(size / 8..size / 2), rng.gen_range(size / 8..size / 2));
        let (x0, y0) = (rng.gen_range(0..size - w), rng.gen_range(0..size - h));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                labels[y * size + x] = id;
            }
        }
    }
    let data = labels
        .iter()
        .flat_map(|&l| colors[l as usize].map(|c| c + rng.gen_range(-2.0..2.0)))
        .collect();
    (Tensor::new(&[size, size, 3], data).unwrap(), labels)
}

fn slic_properties() -> Outcome {
    let mut worst_recall: f64 = 1.0;
    let mut worst_count: f64 = 0.0;
    let mut scenes = 0;
    for size in [64usize, 128, 256] {
        for seed in 0..4 {
            let (features, truth) = rectangle_scene(size, seed * 31 + size as u64);
            let k = size * size / 256;
            let map = slic_segment(&features, &SlicParams::new(k).with_compactness(10.0)).map_err(|e| e.to_string())?;
            let labels = map.labels();
            ensure(labels.len() == size * size, "labels do not cover the image")?;
            ensure(labels.iter().all(|&l| (l as usize) < map.count()), "label out of range")?;
            ensure(map.pixel_counts().iter().sum::<usize>() == size * size, "pixel counts do not partition")?;
            ensure(map.pixel_counts().iter().all(|&c| c > 0), "empty superpixel")?;
            let (_, components) = connected_components(size, size, labels);
            ensure(components == map.count(), format!("{components} components for {} labels", map.count()))?;
            let recall = boundary_recall(&truth, &map, 2).map_err(|e| e.to_string())?;
            let dev = (map.count() as f64 - k as f64).abs() / k as f64;
            worst_recall = worst_recall.min(recall);
            worst_count = worst_count.max(dev);
            ensure(recall >= 0.9, format!("{size}x{size} seed {seed}: boundary recall {recall:.3}"))?;
            ensure(dev <= 0.3, format!("{size}x{size} seed {seed}: {} superpixels for k = {k}", map.count()))?;
            scenes += 1;
        }
    }
    Ok(format!(
        "{scenes} rectangle scenes: partition and connectivity hold, min boundary recall {worst_recall:.3}, max |S-k|/k {worst_count:.3}"
    ))
}

// ── 5, 6. training harnesses ─────────────────────────────────────────

fn scenes(seeds: std::ops::Range<u64>) -> Vec<SyntheticScene> {
    seeds.map(|s| synth_scene(&SyntheticSceneSpec::new(64, 64, s)).unwrap()).collect()
}

fn harness_pipeline(train_scenes: &[SyntheticScene]) -> PipelineConfig {
    let mut pc = PipelineConfig { window: 64, stride: 64, ..PipelineConfig::default() };
    let stacks: Vec<RasterStack> = train_scenes.iter().map(|s| s.stack.clone()).collect();
    pc.norm = dataset_norm(&stacks, &pc.bands).unwrap();
    pc
}

fn samples(scenes: &[SyntheticScene], pc: &PipelineConfig) -> Vec<Sample> {
    scenes.iter().flat_map(|s| prepare_samples(&s.stack, pc).unwrap()).collect()
}

fn fit(train_set: &[Sample], config: &TrainConfig) -> DcnModel<f32> {
    let mut model = DcnModel::<f32>::build(DcnConfig::reduced(64)).unwrap();
    let mut opt = AdamState::new(AdamParams::default(), model.params().into_iter().map(|(_, t)| t.shape()));
    train(&mut model, &mut opt, train_set, &[], config).unwrap();
    model
}

fn overfit_harness() -> Outcome {
    let started = Instant::now();
    let train_scenes = scenes(100..108);
    let pc = harness_pipeline(&train_scenes);
    let set = samples(&train_scenes, &pc);
    let model = fit(&set, &TrainConfig { batch_size: 2, epochs: 200, seed: 1, ..TrainConfig::default() });
    let j = iou(&evaluate(&model, &set, 8).unwrap());
    let secs = started.elapsed().as_secs_f64();
    ensure(j >= 0.95, format!("training-set IoU {j:.4} after 200 epochs"))?;
    ensure(secs < 600.0, format!("took {secs:.0}s"))?;
    Ok(format!("8 scenes, 200 epochs: training-set IoU {j:.4} (>= 0.95)"))
}

const GENERALIZATION_EPOCHS: usize = 200;

fn generalization_smoke() -> Outcome {
    let all = scenes(1000..1040);
    let (train_scenes, test_scenes) = all.split_at(32);
    let pc = harness_pipeline(train_scenes);
    let model = fit(
        &samples(train_scenes, &pc),
        &TrainConfig { batch_size: 4, epochs: GENERALIZATION_EPOCHS, seed: 1, augment: true, ..TrainConfig::default() },
    );
    let test = samples(test_scenes, &pc);
    let j = iou(&evaluate(&model, &test, 8).unwrap());
    let preds = predict_samples(&model, &test, 8).unwrap();
    let (mut hits, mut area) = (0usize, 0usize);
    for (scene, pred) in test_scenes.iter().zip(&preds) {
        for (&veg, &p) in scene.vegetation.iter().zip(pred) {
            if veg {
                area += 1;
                hits += usize::from(p == 1);
            }
        }
    }
    let fpr = hits as f64 / area as f64;
    let detail = format!("held-out IoU {j:.4} (>= 0.80), vegetation false-positive rate {:.2}% (< 10%)", 100.0 * fpr);
    ensure(j >= 0.80 && fpr < 0.10, detail.clone())?;
    Ok(detail)
}

// ── 7. protocol ──────────────────────────────────────────────────────

fn protocol_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut stack = RasterStack::new(1024, 1024, 0.1524).unwrap();
    for role in [BandRole::Red, BandRole::Nir, BandRole::Dsm] {
        stack.push_band(role, (0..1024 * 1024).map(|_| rng.gen()).collect()).unwrap();
    }
    stack.push_band(BandRole::Mask, (0..1024 * 1024).map(|_| f32::from(rng.gen::<bool>())).collect()).unwrap();
    let set = tile(&stack, 128, 128).map_err(|e| e.to_string())?;
    ensure(set.len() == 64, format!("{} tiles", set.len()))?;
    ensure(stitch(&set).map_err(|e| e.to_string())? == stack, "stitch(tile(x)) != x")?;

    let spec = SplitSpec { train: 256, validation: 40, test: 3, seed: 7 };
    let split = split_dataset((0..299).collect::<Vec<u32>>(), &spec).map_err(|e| e.to_string())?;
    let counts = (split.train.len(), split.validation.len(), split.test.len());
    ensure(counts == (256, 40, 3), format!("split counts {counts:?}"))?;
    let mut all: Vec<u32> = split.train.iter().chain(&split.validation).chain(&split.test).copied().collect();
    all.sort_unstable();
    ensure(all == (0..299).collect::<Vec<_>>(), "split is not a partition")?;
    Ok("1024x1024 at 128/128 gives 64 tiles; stitch is exact; 299 tiles split 256/40/3".into())
}

// ── 8. cost ──────────────────────────────────────────────────────────

fn cost_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let ne: u64 = rng.gen_range(1..1000);
        let tt: f64 = rng.gen_range(0.01..500.0);
        let c = computational_cost(ne, tt).map_err(|e| e.to_string())?;
        ensure(c.cc_minutes == ne as f64 * tt / 60.0, format!("CC({ne}, {tt}) = {}", c.cc_minutes))?;
    }
    let tt: f64 = 461.0 * 60.0 / 250.0;
    ensure((tt - 110.6).abs() < 0.05, format!("inverted TT {tt}"))?;
    let cc = computational_cost(250, 110.6).unwrap().cc_minutes;
    ensure((cc - 461.0).abs() <= 0.5, format!("CC(250, 110.6) = {cc}"))?;
    Ok(format!("CC = NE*TT/60 exact on 1000 draws; 461 min at NE 250 gives TT {tt:.2}s, CC(250, 110.6) = {cc:.2}"))
}

// ── 9. determinism and formats ───────────────────────────────────────

fn small_run() -> (Vec<u8>, String, DcnModel<f32>, Vec<Sample>) {
    let train_scenes: Vec<SyntheticScene> =
        (0..3).map(|s| synth_scene(&SyntheticSceneSpec::new(32, 32, 900 + s)).unwrap()).collect();
    let mut pc = PipelineConfig { window: 32, stride: 32, ..PipelineConfig::default() };
    let stacks: Vec<RasterStack> = train_scenes.iter().map(|s| s.stack.clone()).collect();
    pc.norm = dataset_norm(&stacks, &pc.bands).unwrap();
    let set: Vec<Sample> = stacks.iter().flat_map(|s| prepare_samples(s, &pc).unwrap()).collect();
    let mut model = DcnModel::<f32>::build(DcnConfig::reduced(32)).unwrap();
    let mut opt = AdamState::new(AdamParams::default(), model.params().into_iter().map(|(_, t)| t.shape()));
    let config = TrainConfig { batch_size: 2, epochs: 3, seed: 9, augment: true, ..TrainConfig::default() };
    let report = train(&mut model, &mut opt, &set, &set, &config).unwrap();
    let counts = evaluate(&model, &set, 4).unwrap();
    let mut doc = MetricsDocument::new(Some(&report), &counts).unwrap();
    // Wall-clock fields are measurements, not results.
    doc.tt_seconds = 0.0;
    doc.cc_minutes = 0.0;
    let mut ck = Checkpoint::new(model.clone());
    ck.step = opt.t;
    ck.optimizer = Some(opt);
    ck.metadata = pc.to_metadata();
    (encode(&ck).unwrap(), doc.to_json(), model, set)
}

fn determinism_and_formats() -> Outcome {
    let (ck_a, hist_a, model, set) = small_run();
    let (ck_b, hist_b, _, _) = small_run();
    ensure(ck_a == ck_b, "checkpoints differ between runs")?;
    ensure(hist_a == hist_b, "histories differ between runs")?;

    let ck = decode(&ck_a).map_err(|e| e.to_string())?;
    ensure(encode(&ck).unwrap() == ck_a, "checkpoint round trip is not bit-exact")?;

    let scene = synth_scene(&SyntheticSceneSpec::new(64, 48, 5)).unwrap().stack;
    let bytes = encode_bmsr(&scene).map_err(|e| e.to_string())?;
    let back = decode_bmsr(&bytes).map_err(|e| e.to_string())?;
    ensure(back == scene, "BMSR round trip changed the stack")?;
    ensure(encode_bmsr(&back).unwrap() == bytes, "BMSR re-encoding differs")?;

    let mut pairs = 0;
    let preds = predict_samples(&model, &set, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random: Vec<(Vec<u8>, Vec<u8>)> = (0..50)
        .map(|_| ((0..1024).map(|_| rng.gen_range(0..2)).collect(), (0..1024).map(|_| rng.gen_range(0..2)).collect()))
        .collect();
    let model_pairs = preds.into_iter().zip(set.iter().map(|s| s.mask.clone().unwrap()));
    for (pred, truth) in model_pairs.chain(random) {
        let c = confusion(&pred, &truth).unwrap();
        let map = error_map(&pred, &truth, 32, 32).unwrap();
        let got = (map.count(WHITE), map.count(RED), map.count(BLUE), map.count(BLACK));
        ensure(got == (c.tp as usize, c.fp as usize, c.fn_ as usize, c.tn as usize), format!("error map {got:?} vs {c:?}"))?;
        pairs += 1;
    }
    Ok(format!("two seeded runs bit-identical; checkpoint and BMSR round trips exact; error map matches counts on {pairs} pairs"))
}
