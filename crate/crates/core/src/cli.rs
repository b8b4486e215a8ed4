//! The `dcn` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{normalize, read_bmsr, synth_scene, write_bmsr, BandRole, RasterStack, SyntheticSceneSpec};
use crate::error::{param_err, Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{confusion, error_map, iou, overall_accuracy, write_ppm, ConfusionCounts};
use crate::model::{DcnConfig, DcnModel};
use crate::optim::{AdamParams, AdamState};
use crate::pipeline::{dataset_norm, predict_scene, prepare_samples, stack_tensor, slic_features, PipelineConfig, Sample};
use crate::superpixel::{slic_segment, SlicParams};
use crate::train::{evaluate, train, MetricsDocument, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dcn", version, about = "Building footprint extraction with a superpixel competition network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scenes and their building masks.
    Synth(SynthArgs),
    /// Segment a raster into SLIC superpixels.
    Slic(SlicArgs),
    /// Train a model on scene/mask pairs.
    Train(TrainArgs),
    /// Predict a building mask for a scene.
    Predict(PredictArgs),
    /// Compare a predicted mask with the truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Scene width and height in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SlicArgs {
    #[arg(long)]
    input: PathBuf,
    /// Target number of superpixels.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 10.0)]
    compactness: f64,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 10.0)]
    feature_gain: f64,
    #[arg(long, default_value_t = 1)]
    feature_blur: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of `scene_*.bmsr` files with matching `mask_*.bmsr`.
    #[arg(long)]
    data: PathBuf,
    /// Optional validation directory laid out like `--data`.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    window: usize,
    #[arg(long, default_value_t = 128)]
    stride: usize,
    /// Encoder block widths, five comma-separated integers.
    #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64, 128, 256, 512])]
    channels: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Target superpixel area in pixels.
    #[arg(long, default_value_t = 64)]
    superpixel_area: usize,
    #[arg(long, default_value_t = 10.0)]
    compactness: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Save an intermediate checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop after N epochs without validation improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Show each training window under a random flip or quarter turn.
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    errmap: Option<PathBuf>,
    /// Override the window stride stored in the model.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    errmap: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 1;
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Slic(a) => slic(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the worker pool at `DCN_THREADS` when it is set.
fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("DCN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DCN_THREADS must be a positive integer, got {v:?}"))?;
    // A pool may already exist when `run` is called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn with_path(path: &Path, e: Error) -> Error {
    e.context(path.display())
}

fn synth(a: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for i in 0..a.count {
        let seed = a.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut scene = synth_scene(&SyntheticSceneSpec::new(a.size, a.size, seed)).map_err(|e| e.context("--size"))?.stack;
        let mask = scene.remove_band(BandRole::Mask).expect("synthetic scenes carry a mask");
        let mask = RasterStack::new(a.size, a.size, scene.gsd())?.with_band(BandRole::Mask, mask)?;
        write_bmsr(&scene, a.out.join(format!("scene_{i:04}.bmsr")))?;
        write_bmsr(&mask, a.out.join(format!("mask_{i:04}.bmsr")))?;
    }
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn slic(a: SlicArgs) -> Result<()> {
    let scene = read_bmsr(&a.input)?;
    let mut bands: Vec<BandRole> = scene.roles().into_iter().filter(|r| !r.is_categorical()).collect();
    bands.sort();
    if bands.is_empty() {
        return Err(with_path(&a.input, param_err!("no real-valued bands to segment")));
    }
    let (norm, _) = normalize(&scene, None).map_err(|e| with_path(&a.input, e))?;
    let features = slic_features(&stack_tensor(&norm, &bands)?, a.feature_gain, a.feature_blur)?;
    let params = SlicParams {
        max_iters: a.iters,
        ..SlicParams::new(a.k).with_compactness(a.compactness)
    };
    let map = slic_segment(&features, &params).map_err(|e| e.context("--k/--compactness/--iters"))?;
    let labels = map.labels().iter().map(|&l| l as f32).collect();
    let out = RasterStack::new(scene.width(), scene.height(), scene.gsd())?.with_band(BandRole::Labels, labels)?;
    write_bmsr(&out, &a.out)?;
    println!("{} superpixels written to {}", map.count(), a.out.display());
    Ok(())
}

/// Scenes in `dir`, each with its MASK band attached.
fn load_labelled_scenes(dir: &Path) -> Result<Vec<(PathBuf, RasterStack)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("scene_") && name.ends_with(".bmsr")
        })
        .collect();
    scenes.sort();
    if scenes.is_empty() {
        return Err(Error::EmptyDataset(format!("{}: no scene_*.bmsr files", dir.display())));
    }
    scenes
        .into_iter()
        .map(|path| {
            let mut scene = read_bmsr(&path)?;
            if scene.band(BandRole::Mask).is_none() {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                let mask_path = path.with_file_name(name.replacen("scene_", "mask_", 1));
                let mask = read_bmsr(&mask_path)?;
                if mask.width() != scene.width() || mask.height() != scene.height() {
                    return Err(with_path(&mask_path, param_err!("mask size does not match its scene")));
                }
                let data = mask
                    .band(BandRole::Mask)
                    .ok_or_else(|| with_path(&mask_path, param_err!("no MASK band")))?
                    .to_vec();
                scene.push_band(BandRole::Mask, data).map_err(|e| with_path(&mask_path, e))?;
            }
            Ok((path, scene))
        })
        .collect()
}

fn samples_of(scenes: &[(PathBuf, RasterStack)], cfg: &PipelineConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (path, s) in scenes {
        out.extend(prepare_samples(s, cfg).map_err(|e| with_path(path, e))?);
    }
    Ok(out)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let scenes = load_labelled_scenes(&a.data)?;
    let val_scenes = match &a.val_data {
        Some(d) => load_labelled_scenes(d)?,
        None => Vec::new(),
    };
    let mut pipeline = PipelineConfig {
        window: a.window,
        stride: a.stride,
        superpixel_area: a.superpixel_area,
        compactness: a.compactness,
        ..PipelineConfig::default()
    };
    let stacks: Vec<RasterStack> = scenes.iter().map(|(_, s)| s.clone()).collect();
    pipeline.norm = dataset_norm(&stacks, &pipeline.bands).map_err(|e| with_path(&a.data, e))?;
    let config = DcnConfig {
        input_channels: pipeline.bands.len(),
        block_channels: a.channels.clone(),
        embedding_dim: a.embedding_dim,
        dropout_rate: a.dropout,
        tile_size: a.window,
        seed: a.seed,
        ..DcnConfig::default()
    };
    let mut model = DcnModel::<f32>::build(config).map_err(|e| e.context("--window/--channels/--embedding-dim/--dropout"))?;
    let train_set = samples_of(&scenes, &pipeline)?;
    let val_set = samples_of(&val_scenes, &pipeline)?;
    let adam = AdamParams {
        lr: a.lr,
        ..AdamParams::default()
    };
    let mut optimizer = AdamState::new(adam, model.params().into_iter().map(|(_, t)| t.shape()));
    let tc = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: a.checkpoint_every.map(|_| a.out.clone()),
        patience: a.patience,
        failure_dump: Some(a.out.with_extension("failed.dcnw")),
        augment: a.augment,
    };
    let report = train(&mut model, &mut optimizer, &train_set, &val_set, &tc).map_err(|e| match e {
        Error::InvalidParameter(_) => e.context("--batch/--epochs"),
        e => e,
    })?;

    let mut ck = Checkpoint::new(model);
    ck.step = optimizer.t;
    ck.optimizer = Some(optimizer);
    ck.metadata = pipeline.to_metadata();
    save_checkpoint(&ck, &a.out)?;

    let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
    let counts = evaluate(&ck.model, eval_set, a.batch)?;
    let doc = MetricsDocument::new(Some(&report), &counts)?;
    if let Some(h) = &a.history {
        write_atomic(h, doc.to_json().as_bytes())?;
    }
    println!(
        "trained {} epochs: loss {:.4}, iou {:.4}, oa {:.4} on {} windows",
        report.history.len(),
        report.history.last().map_or(f64::NAN, |r| r.loss),
        doc.iou,
        doc.oa,
        if val_set.is_empty() { "training" } else { "validation" }
    );
    Ok(())
}

fn mask_of(path: &Path) -> Result<(RasterStack, Vec<f32>)> {
    let stack = read_bmsr(path)?;
    let mask = stack
        .band(BandRole::Mask)
        .ok_or_else(|| with_path(path, param_err!("no MASK band")))?
        .to_vec();
    Ok((stack, mask))
}

fn compare(pred: &[f32], truth_path: &Path, pred_dims: (usize, usize), errmap: Option<&Path>) -> Result<ConfusionCounts> {
    let (truth_stack, truth) = mask_of(truth_path)?;
    if (truth_stack.width(), truth_stack.height()) != pred_dims {
        return Err(with_path(
            truth_path,
            param_err!(
                "truth is {}x{}, prediction is {}x{}",
                truth_stack.width(),
                truth_stack.height(),
                pred_dims.0,
                pred_dims.1
            ),
        ));
    }
    let counts = confusion(pred, &truth).map_err(|e| with_path(truth_path, e.context("prediction vs truth")))?;
    if let Some(path) = errmap {
        write_ppm(&error_map(pred, &truth, pred_dims.0, pred_dims.1)?, path)?;
    }
    Ok(counts)
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let mut pipeline = PipelineConfig::from_metadata(&ck.metadata).map_err(|e| with_path(&a.model, e))?;
    if let Some(s) = a.stride {
        pipeline.stride = s;
    }
    let mut scene = read_bmsr(&a.input)?;
    scene.remove_band(BandRole::Mask);
    let pred = predict_scene(&ck.model, &scene, &pipeline, a.batch).map_err(|e| with_path(&a.input, e))?;
    write_bmsr(&pred, &a.out)?;
    if let Some(truth) = &a.truth {
        let mask = pred.band(BandRole::Mask).expect("prediction has a mask");
        let c = compare(mask, truth, (pred.width(), pred.height()), a.errmap.as_deref())?;
        println!("oa {:.6} iou {:.6} tp {} fp {} fn {} tn {}", overall_accuracy(&c)?, iou(&c), c.tp, c.fp, c.fn_, c.tn);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (pred_stack, pred) = mask_of(&a.pred)?;
    let c = compare(&pred, &a.truth, (pred_stack.width(), pred_stack.height()), a.errmap.as_deref())?;
    let doc = MetricsDocument::new(None, &c)?;
    if let Some(path) = &a.json {
        write_atomic(path, doc.to_json().as_bytes())?;
    }
    println!("oa {:.6} iou {:.6} tp {} fp {} fn {} tn {}", doc.oa, doc.iou, c.tp, c.fp, c.fn_, c.tn);
    Ok(())
}
