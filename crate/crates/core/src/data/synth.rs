//! Synthetic scenes: flat-roofed rectangular buildings standing on a gently
//! sloped ground, plus low vegetation blobs that are bright in NIR.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::raster::{BandRole, RasterStack};
use crate::error::{param_err, Error, Result};

/// Keep-out margin between buildings, and between buildings and vegetation.
const GAP: usize = 2;
const ATTEMPTS: usize = 200;
const GROUND_RGB: [f32; 3] = [0.40, 0.38, 0.33];
const GROUND_NIR: f32 = 0.35;
const VEGETATION_RGBN: [f32; 4] = [0.12, 0.30, 0.10, 0.60];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub buildings: RangeInclusive<usize>,
    /// Side length range of a building, pixels.
    pub building_size: RangeInclusive<usize>,
    /// Roof height above ground, metres.
    pub building_height: (f32, f32),
    pub vegetation: RangeInclusive<usize>,
    /// Semi-axis range of a vegetation ellipse, pixels.
    pub vegetation_radius: (f32, f32),
    /// Peak canopy height above ground, metres.
    pub vegetation_height: (f32, f32),
    /// Gaussian noise std for R, G, B, NIR and DSM.
    pub noise: [f32; 5],
    pub gsd: f32,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// Defaults tuned for 64x64 scenes; object counts scale with area.
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        let scale = (width * height) as f64 / 4096.0;
        let count = |n: f64| ((n * scale).round() as usize).max(1);
        Self {
            width,
            height,
            buildings: count(2.0)..=count(4.0),
            building_size: 10..=20,
            building_height: (4.0, 12.0),
            vegetation: count(1.0)..=count(3.0),
            vegetation_radius: (4.0, 8.0),
            vegetation_height: (0.3, 1.5),
            noise: [0.02, 0.02, 0.02, 0.02, 0.15],
            gsd: 0.1524,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(param_err!("scene must be non-empty"));
        }
        if self.buildings.is_empty() || self.building_size.is_empty() || self.vegetation.is_empty() {
            return Err(param_err!("count and size ranges must be non-empty"));
        }
        if *self.building_size.start() == 0 {
            return Err(param_err!("building size must be at least 1"));
        }
        let ordered = |(lo, hi): (f32, f32)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.building_height)
            || !ordered(self.vegetation_radius)
            || !ordered(self.vegetation_height)
            || self.vegetation_radius.0 <= 0.0
        {
            return Err(param_err!("real-valued ranges must be finite, ordered and positive"));
        }
        if self.noise.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(param_err!("noise std must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    fn grown(&self, by: usize) -> (isize, isize, isize, isize) {
        let b = by as isize;
        (
            self.x as isize - b,
            self.y as isize - b,
            (self.x + self.w) as isize + b,
            (self.y + self.h) as isize + b,
        )
    }

    fn overlaps_grown(&self, other: &Rect, by: usize) -> bool {
        let (x0, y0, x1, y1) = self.grown(by);
        (other.x as isize) < x1
            && x0 < (other.x + other.w) as isize
            && (other.y as isize) < y1
            && y0 < (other.y + other.h) as isize
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Bands RED, GREEN, BLUE, NIR, DSM, MASK.
    pub stack: RasterStack,
    /// True on vegetation pixels.
    pub vegetation: Vec<bool>,
    pub buildings: Vec<Rect>,
}

pub fn synth_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n_buildings = rng.gen_range(spec.buildings.clone());
    let mut buildings: Vec<Rect> = Vec::with_capacity(n_buildings);
    for i in 0..n_buildings {
        let placed = (0..ATTEMPTS).find_map(|_| {
            let bw = rng.gen_range(spec.building_size.clone());
            let bh = rng.gen_range(spec.building_size.clone());
            if bw > w || bh > h {
                return None;
            }
            let r = Rect {
                x: rng.gen_range(0..=w - bw),
                y: rng.gen_range(0..=h - bh),
                w: bw,
                h: bh,
            };
            (!buildings.iter().any(|b| b.overlaps_grown(&r, GAP))).then_some(r)
        });
        match placed {
            Some(r) => buildings.push(r),
            None => {
                return Err(Error::Infeasible(format!(
                    "could not place building {} of {n_buildings} in a {w}x{h} scene",
                    i + 1
                )))
            }
        }
    }

    let mut red = vec![0f32; w * h];
    let mut green = vec![0f32; w * h];
    let mut blue = vec![0f32; w * h];
    let mut nir = vec![0f32; w * h];
    let mut dsm = vec![0f32; w * h];
    let mut mask = vec![0f32; w * h];
    let mut vegetation = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            red[i] = GROUND_RGB[0];
            green[i] = GROUND_RGB[1];
            blue[i] = GROUND_RGB[2];
            nir[i] = GROUND_NIR;
            dsm[i] = 100.0 + 0.01 * x as f32 + 0.005 * y as f32;
        }
    }

    let n_veg = rng.gen_range(spec.vegetation.clone());
    for i in 0..n_veg {
        let placed = (0..ATTEMPTS).find_map(|_| {
            let rx = rng.gen_range(spec.vegetation_radius.0..=spec.vegetation_radius.1);
            let ry = rng.gen_range(spec.vegetation_radius.0..=spec.vegetation_radius.1);
            let cx = rng.gen_range(0.0..w as f32);
            let cy = rng.gen_range(0.0..h as f32);
            let pixels = ellipse_pixels(w, h, cx, cy, rx, ry);
            let clear = pixels.iter().all(|&p| {
                let px = Rect { x: p % w, y: p / w, w: 1, h: 1 };
                !buildings.iter().any(|b| b.overlaps_grown(&px, GAP))
            });
            (clear && !pixels.is_empty()).then_some((cx, cy, rx, ry, pixels))
        });
        let Some((cx, cy, rx, ry, pixels)) = placed else {
            return Err(Error::Infeasible(format!(
                "could not place vegetation blob {} of {n_veg} in a {w}x{h} scene",
                i + 1
            )));
        };
        let peak = rng.gen_range(spec.vegetation_height.0..=spec.vegetation_height.1);
        for p in pixels {
            let (dx, dy) = ((p % w) as f32 - cx, (p / w) as f32 - cy);
            let r2 = (dx / rx).powi(2) + (dy / ry).powi(2);
            red[p] = VEGETATION_RGBN[0];
            green[p] = VEGETATION_RGBN[1];
            blue[p] = VEGETATION_RGBN[2];
            nir[p] = VEGETATION_RGBN[3];
            dsm[p] = dsm[p].max(ground(p % w, p / w) + peak * (1.0 - r2).max(0.0));
            vegetation[p] = true;
        }
    }

    for b in &buildings {
        let g = rng.gen_range(0.3f32..0.6);
        let tint: [f32; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
        let height = rng.gen_range(spec.building_height.0..=spec.building_height.1);
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                let i = y * w + x;
                red[i] = g + tint[0];
                green[i] = g + tint[1];
                blue[i] = g + tint[2];
                nir[i] = 0.8 * g;
                dsm[i] = ground(x, y) + height;
                mask[i] = 1.0;
            }
        }
    }

    for (band, &std) in [&mut red, &mut green, &mut blue, &mut nir, &mut dsm].into_iter().zip(&spec.noise) {
        if std > 0.0 {
            let noise = Normal::new(0.0, std).expect("std validated");
            for v in band.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }

    let stack = RasterStack::new(w, h, spec.gsd)?
        .with_band(BandRole::Red, red)?
        .with_band(BandRole::Green, green)?
        .with_band(BandRole::Blue, blue)?
        .with_band(BandRole::Nir, nir)?
        .with_band(BandRole::Dsm, dsm)?
        .with_band(BandRole::Mask, mask)?;
    Ok(SyntheticScene {
        stack,
        vegetation,
        buildings,
    })
}

fn ground(x: usize, y: usize) -> f32 {
    100.0 + 0.01 * x as f32 + 0.005 * y as f32
}

fn ellipse_pixels(w: usize, h: usize, cx: f32, cy: f32, rx: f32, ry: f32) -> Vec<usize> {
    let x0 = (cx - rx).floor().max(0.0) as usize;
    let x1 = ((cx + rx).ceil() as usize).min(w - 1);
    let y0 = (cy - ry).floor().max(0.0) as usize;
    let y1 = ((cy + ry).ceil() as usize).min(h - 1);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            if (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0 {
                out.push(y * w + x);
            }
        }
    }
    out
}
