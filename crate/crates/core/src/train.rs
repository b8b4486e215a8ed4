//! The training loop.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{param_err, Error, Result};
use crate::layers::Phase;
use crate::metrics::{computational_cost, confusion, iou, overall_accuracy, ConfusionCounts, CostReport};
use crate::model::DcnModel;
use crate::optim::{adam_step, AdamState};
use crate::pipeline::{dihedral, predict_samples, Sample};
use crate::superpixel::SuperpixelMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (needs `checkpoint_path`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    /// Stop after this many epochs without a better validation IoU.
    pub patience: Option<usize>,
    /// Where to dump the last good model when the loss stops being finite.
    pub failure_dump: Option<PathBuf>,
    /// Present each window under a random flip or quarter turn.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 250,
            seed: 0,
            checkpoint_every: None,
            checkpoint_path: None,
            patience: None,
            failure_dump: None,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Pixel-weighted mean training loss over the epoch.
    pub loss: f64,
    pub val_iou: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub cost: CostReport,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Pixel confusion counts of the model's predictions over `samples`.
pub fn evaluate(model: &DcnModel<f32>, samples: &[Sample], batch: usize) -> Result<ConfusionCounts> {
    let preds = predict_samples(model, samples, batch)?;
    let mut total = ConfusionCounts::default();
    for (s, p) in samples.iter().zip(&preds) {
        let truth = s
            .mask
            .as_ref()
            .ok_or_else(|| param_err!("sample at ({}, {}) has no MASK band", s.x, s.y))?;
        total += confusion(p, truth)?;
    }
    Ok(total)
}

fn check_samples(samples: &[Sample], what: &str) -> Result<()> {
    for s in samples {
        if s.mask.is_none() || s.targets.len() != s.superpixels.count() {
            return Err(param_err!("{what} sample at ({}, {}) has no MASK band", s.x, s.y));
        }
    }
    Ok(())
}

/// Loss, gradients and batch statistics for one batch; applies nothing.
fn batch_step(
    model: &DcnModel<f32>,
    batch: &[&Sample],
    step: u64,
) -> Result<(f64, f64, Vec<Tensor<f32>>, Vec<crate::autodiff::BatchStats<f32>>)> {
    let shape = batch[0].input.shape().to_vec();
    let mut data = Vec::with_capacity(batch.len() * batch[0].input.len());
    let mut truth = Vec::new();
    let mut weights = Vec::new();
    for s in batch {
        data.extend_from_slice(s.input.data());
        truth.extend_from_slice(&s.targets);
        weights.extend_from_slice(&s.weights);
    }
    let input = Tensor::new(&[batch.len(), shape[0], shape[1], shape[2]], data)?;
    let maps: Vec<&SuperpixelMap> = batch.iter().map(|s| &s.superpixels).collect();

    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape, true);
    let x = tape.leaf(input);
    let fw = model.forward_on_tape(&mut tape, &params, x, &maps, Phase::Train, step)?;
    let loss = tape.softmin_cross_entropy(fw.distances, &truth, Some(&weights))?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let g = params
        .iter()
        .map(|&p| grads.take(p).ok_or_else(|| Error::Autodiff("parameter without gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    let pixels = weights.iter().map(|&w| w as f64).sum();
    Ok((value, pixels, g, fw.bn_stats))
}

/// Trains `model` in place.
///
/// Every epoch shuffles the training windows with a generator seeded from
/// `config.seed` and the epoch index, then takes one ADAM step per batch.
/// With the same inputs, two runs produce bit-identical models and losses.
pub fn train(
    model: &mut DcnModel<f32>,
    optimizer: &mut AdamState<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("no training windows".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(param_err!("batch size and epochs must be at least 1"));
    }
    check_samples(train_set, "training")?;
    check_samples(val_set, "validation")?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    if optimizer.m.len() != names.len() {
        return Err(param_err!("optimizer state has {} slots, model has {} parameters", optimizer.m.len(), names.len()));
    }

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<f64> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut pixel_sum) = (0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            let augmented: Vec<Sample> = if config.augment {
                idx.iter()
                    .map(|&i| dihedral(&train_set[i], rng.gen_range(0..8)))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let batch: Vec<&Sample> = if config.augment {
                augmented.iter().collect()
            } else {
                idx.iter().map(|&i| &train_set[i]).collect()
            };
            let (loss, pixels, grads, stats) = match batch_step(model, &batch, optimizer.t) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(path) = &config.failure_dump {
                        let mut ck = Checkpoint::new(model.clone());
                        ck.step = optimizer.t;
                        ck.optimizer = Some(optimizer.clone());
                        save_checkpoint(&ck, path)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut model.params_mut(), &grads, &names, optimizer)?;
            model.clamp_codebook();
            model.update_running_stats(&stats)?;
            loss_sum += loss * pixels;
            pixel_sum += pixels;
        }

        let val_iou = if val_set.is_empty() {
            None
        } else {
            Some(iou(&evaluate(model, val_set, config.batch_size)?))
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / pixel_sum,
            val_iou,
            seconds: started.elapsed().as_secs_f64(),
        });

        if let (Some(every), Some(path)) = (config.checkpoint_every, &config.checkpoint_path) {
            if every > 0 && (epoch + 1) % every == 0 {
                let mut ck = Checkpoint::new(model.clone());
                ck.step = optimizer.t;
                ck.optimizer = Some(optimizer.clone());
                save_checkpoint(&ck, path)?;
            }
        }
        if let (Some(patience), Some(v)) = (config.patience, val_iou) {
            if best.map_or(true, |b| v > b) {
                best = Some(v);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    let ne = history.len() as u64;
    let tt = history.iter().map(|r| r.seconds).sum::<f64>() / ne as f64;
    Ok(TrainReport {
        history,
        cost: computational_cost(ne, tt)?,
    })
}

/// The JSON document written after training or evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsDocument {
    pub epoch: Vec<usize>,
    pub loss: Vec<f64>,
    pub val_iou: Vec<Option<f64>>,
    pub oa: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub ne: u64,
    pub tt_seconds: f64,
    pub cc_minutes: f64,
}

impl MetricsDocument {
    pub fn new(report: Option<&TrainReport>, counts: &ConfusionCounts) -> Result<Self> {
        let history = report.map_or(&[][..], |r| &r.history[..]);
        let cost = report.map(|r| r.cost);
        Ok(Self {
            epoch: history.iter().map(|r| r.epoch).collect(),
            loss: history.iter().map(|r| r.loss).collect(),
            val_iou: history.iter().map(|r| r.val_iou).collect(),
            oa: overall_accuracy(counts)?,
            iou: iou(counts),
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            tn: counts.tn,
            ne: cost.map_or(0, |c| c.ne),
            tt_seconds: cost.map_or(0.0, |c| c.tt_seconds),
            cc_minutes: cost.map_or(0.0, |c| c.cc_minutes),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}
