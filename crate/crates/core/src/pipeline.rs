//! From raw scenes to network samples and back.
//!
//! A scene gets an NDVI band, is normalized with dataset-wide ranges, and
//! is cut into windows. Each window becomes a [`Sample`]: the input tensor
//! in a fixed band order, its SLIC superpixels, and (when the scene has a
//! MASK) the per-superpixel majority labels used as training targets.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{compute_ndvi, normalize, stitch, tile, BandRole, NormStats, RasterStack, Tile, TileSet};
use crate::error::{param_err, Error, Result};
use crate::model::DcnModel;
use crate::superpixel::{slic_segment, SlicParams, SuperpixelMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Network input channels, in order.
    pub bands: Vec<BandRole>,
    pub window: usize,
    pub stride: usize,
    /// Target superpixel area in pixels; `k = window^2 / superpixel_area`.
    pub superpixel_area: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    pub min_size_factor: f64,
    /// SLIC features are per-window z-scores of the input bands times this.
    pub feature_gain: f64,
    /// Passes of a 3x3 binomial blur applied to the SLIC features.
    pub feature_blur: usize,
    /// Dataset-wide band ranges; computed from the training scenes when empty.
    pub norm: NormStats,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bands: vec![
                BandRole::Red,
                BandRole::Green,
                BandRole::Blue,
                BandRole::Nir,
                BandRole::Ndvi,
                BandRole::Dsm,
            ],
            window: 128,
            stride: 128,
            superpixel_area: 64,
            compactness: 10.0,
            slic_iters: 10,
            min_size_factor: 0.25,
            feature_gain: 10.0,
            feature_blur: 1,
            norm: NormStats::default(),
        }
    }
}

impl PipelineConfig {
    pub fn slic_params(&self) -> SlicParams {
        let k = (self.window * self.window / self.superpixel_area.max(1)).max(1);
        SlicParams {
            k_desired: k,
            compactness: self.compactness,
            max_iters: self.slic_iters,
            min_size_factor: self.min_size_factor,
        }
    }

    /// Entries stored in a checkpoint's metadata.
    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let bands = self.bands.iter().map(|b| b.tag()).collect::<Vec<_>>().join(",");
        [
            ("bands", bands),
            ("window", self.window.to_string()),
            ("stride", self.stride.to_string()),
            ("superpixel_area", self.superpixel_area.to_string()),
            ("compactness", format!("{:?}", self.compactness)),
            ("slic_iters", self.slic_iters.to_string()),
            ("min_size_factor", format!("{:?}", self.min_size_factor)),
            ("feature_gain", format!("{:?}", self.feature_gain)),
            ("feature_blur", self.feature_blur.to_string()),
            ("norm", self.norm.to_text()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k:?}")))
        };
        let bad = |k: &str| Error::Format(format!("bad checkpoint metadata {k:?}"));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
        let real = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(k));
        Ok(Self {
            bands: get("bands")?.split(',').map(str::parse).collect::<Result<_>>()?,
            window: num("window")?,
            stride: num("stride")?,
            superpixel_area: num("superpixel_area")?,
            compactness: real("compactness")?,
            slic_iters: num("slic_iters")?,
            min_size_factor: real("min_size_factor")?,
            feature_gain: real("feature_gain")?,
            feature_blur: num("feature_blur")?,
            norm: NormStats::from_text(get("norm")?)?,
        })
    }
}

/// Adds NDVI when the input bands need it and the scene lacks it.
pub fn with_ndvi(scene: &RasterStack, bands: &[BandRole]) -> Result<RasterStack> {
    if bands.contains(&BandRole::Ndvi) && scene.band(BandRole::Ndvi).is_none() {
        compute_ndvi(scene)
    } else {
        Ok(scene.clone())
    }
}

/// Band ranges over several scenes (after NDVI is added).
pub fn dataset_norm(scenes: &[RasterStack], bands: &[BandRole]) -> Result<NormStats> {
    let mut stats = NormStats::default();
    for s in scenes {
        stats.include(&with_ndvi(s, bands)?);
    }
    Ok(stats)
}

/// One network-ready window.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: usize,
    pub y: usize,
    /// `[window, window, bands]`
    pub input: Tensor<f32>,
    pub superpixels: SuperpixelMap,
    /// Pixel truth, when the scene had a MASK band.
    pub mask: Option<Vec<u8>>,
    /// Majority class of each superpixel (empty without a mask).
    pub targets: Vec<u8>,
    /// Pixel count of each superpixel.
    pub weights: Vec<f32>,
}

/// Separable `[1, 2, 1] / 4` blur of an `[h, w, c]` buffer, edges clamped.
fn binomial_blur(data: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut tmp = vec![0f64; data.len()];
    for y in 0..h {
        for x in 0..w {
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            for ch in 0..c {
                let at = |xx: usize| data[(y * w + xx) * c + ch];
                tmp[(y * w + x) * c + ch] = 0.25 * at(l) + 0.5 * at(x) + 0.25 * at(r);
            }
        }
    }
    let mut out = vec![0f64; data.len()];
    for y in 0..h {
        let (u, d) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            for ch in 0..c {
                let at = |yy: usize| tmp[(yy * w + x) * c + ch];
                out[(y * w + x) * c + ch] = 0.25 * at(u) + 0.5 * at(y) + 0.25 * at(d);
            }
        }
    }
    out
}

/// SLIC features of an `[h, w, c]` tensor: `blur` passes of a 3x3 binomial
/// filter, then a per-channel z-score times `gain`. Constant channels become
/// zero.
pub fn slic_features(input: &Tensor<f32>, gain: f64, blur: usize) -> Result<Tensor<f64>> {
    let (_, h, w, c) = input.nhwc()?;
    let mut data: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    for _ in 0..blur {
        data = binomial_blur(&data, h, w, c);
    }
    let n = (data.len() / c) as f64;
    let mut mean = vec![0f64; c];
    for (i, &v) in data.iter().enumerate() {
        mean[i % c] += v;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; c];
    for (i, &v) in data.iter().enumerate() {
        var[i % c] += (v - mean[i % c]).powi(2);
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|&s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 { gain / sd } else { 0.0 }
        })
        .collect();
    let data = data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % c]) * scale[i % c])
        .collect();
    Tensor::new(input.shape(), data)
}

/// Interleaves the chosen bands of a stack into an `[h, w, bands]` tensor.
pub fn stack_tensor(stack: &RasterStack, bands: &[BandRole]) -> Result<Tensor<f32>> {
    let planes = bands.iter().map(|&b| stack.require(b)).collect::<Result<Vec<_>>>()?;
    let pixels = stack.width() * stack.height();
    let mut data = Vec::with_capacity(pixels * bands.len());
    for p in 0..pixels {
        data.extend(planes.iter().map(|plane| plane[p]));
    }
    Tensor::new(&[stack.height(), stack.width(), bands.len()], data)
}

fn make_sample(t: &Tile, cfg: &PipelineConfig) -> Result<Sample> {
    let input = stack_tensor(&t.stack, &cfg.bands)?;
    let superpixels = match &t.superpixels {
        Some(m) => m.clone(),
        None => slic_segment(&slic_features(&input, cfg.feature_gain, cfg.feature_blur)?, &cfg.slic_params())?,
    };
    let weights = superpixels.pixel_counts().iter().map(|&c| c as f32).collect();
    let mask: Option<Vec<u8>> = t.stack.band(BandRole::Mask).map(|m| m.iter().map(|&v| v as u8).collect());
    let targets = match &mask {
        None => Vec::new(),
        Some(m) => {
            let mut ones = vec![0usize; superpixels.count()];
            for (&l, &v) in superpixels.labels().iter().zip(m) {
                ones[l as usize] += v as usize;
            }
            ones.iter()
                .zip(superpixels.pixel_counts())
                .map(|(&o, &n)| u8::from(2 * o > n))
                .collect()
        }
    };
    Ok(Sample {
        x: t.x,
        y: t.y,
        input,
        superpixels,
        mask,
        targets,
        weights,
    })
}

/// Normalizes a raw scene and cuts it into windows.
pub fn scene_tiles(scene: &RasterStack, cfg: &PipelineConfig) -> Result<TileSet> {
    let scene = with_ndvi(scene, &cfg.bands)?;
    let stats = (!cfg.norm.ranges.is_empty()).then_some(&cfg.norm);
    let (scene, _) = normalize(&scene, stats)?;
    tile(&scene, cfg.window, cfg.stride)
}

/// Windows of a raw scene turned into samples, superpixels included.
pub fn prepare_samples(scene: &RasterStack, cfg: &PipelineConfig) -> Result<Vec<Sample>> {
    let set = scene_tiles(scene, cfg)?;
    set.tiles.par_iter().map(|t| make_sample(t, cfg)).collect()
}

/// Superpixel-majority rendering of the truth: what a perfect classifier
/// over these superpixels would output.
pub fn superpixel_truth(sample: &Sample) -> Option<Vec<u8>> {
    sample.mask.as_ref()?;
    Some(sample.superpixels.labels().iter().map(|&l| sample.targets[l as usize]).collect())
}

/// Predicted 0/1 labels for each sample, `batch` windows at a time.
pub fn predict_samples(model: &DcnModel<f32>, samples: &[Sample], batch: usize) -> Result<Vec<Vec<u8>>> {
    if batch == 0 {
        return Err(param_err!("batch size must be at least 1"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let (h, w, c) = {
            let s = chunk[0].input.shape();
            (s[0], s[1], s[2])
        };
        let mut data = Vec::with_capacity(chunk.len() * h * w * c);
        for s in chunk {
            data.extend_from_slice(s.input.data());
        }
        let tiles = Tensor::new(&[chunk.len(), h, w, c], data)?;
        let maps: Vec<&SuperpixelMap> = chunk.iter().map(|s| &s.superpixels).collect();
        let results = model.forward_batch(&tiles, &maps, crate::layers::Phase::Infer)?;
        out.extend(results.into_iter().map(|r| r.labels));
    }
    Ok(out)
}

/// Predicts a whole scene: tiles it, runs the model and stitches a MASK
/// raster of the scene's size.
pub fn predict_scene(model: &DcnModel<f32>, scene: &RasterStack, cfg: &PipelineConfig, batch: usize) -> Result<RasterStack> {
    let set = scene_tiles(scene, cfg)?;
    let samples = set
        .tiles
        .par_iter()
        .map(|t| {
            let mut t = t.clone();
            t.stack.remove_band(BandRole::Mask);
            make_sample(&t, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = predict_samples(model, &samples, batch)?;
    let tiles = set
        .tiles
        .iter()
        .zip(labels)
        .map(|(t, l)| {
            let stack = RasterStack::new(cfg.window, cfg.window, scene.gsd())?
                .with_band(BandRole::Mask, l.into_iter().map(f32::from).collect())?;
            Ok(Tile {
                x: t.x,
                y: t.y,
                stack,
                superpixels: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    stitch(&TileSet { tiles, ..set })
}

/// One of the eight flips and quarter turns of a square sample, applied
/// to the input, superpixel labels and mask alike. Bit 0 mirrors columns,
/// bit 1 mirrors rows, bit 2 transposes. Targets and weights carry over
/// because superpixel ids are unchanged.
pub fn dihedral(sample: &Sample, k: u8) -> Result<Sample> {
    let (h, w, c) = {
        let s = sample.input.shape();
        (s[0], s[1], s[2])
    };
    if h != w {
        return Err(param_err!("dihedral transforms need a square window, got {h}x{w}"));
    }
    let source = |p: usize| {
        let (mut a, mut b) = (p / w, p % w);
        if k & 1 != 0 {
            b = w - 1 - b;
        }
        if k & 2 != 0 {
            a = h - 1 - a;
        }
        if k & 4 != 0 {
            (a, b) = (b, a);
        }
        a * w + b
    };
    let src: Vec<usize> = (0..h * w).map(source).collect();
    let data = src
        .iter()
        .flat_map(|&q| sample.input.data()[q * c..(q + 1) * c].iter().copied())
        .collect();
    let labels = src.iter().map(|&q| sample.superpixels.labels()[q]).collect();
    Ok(Sample {
        x: sample.x,
        y: sample.y,
        input: Tensor::new(sample.input.shape(), data)?,
        superpixels: SuperpixelMap::from_labels(w, h, labels)?,
        mask: sample.mask.as_ref().map(|m| src.iter().map(|&q| m[q]).collect()),
        targets: sample.targets.clone(),
        weights: sample.weights.clone(),
    })
}
