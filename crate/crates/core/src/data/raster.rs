use std::fmt;
use std::str::FromStr;

use crate::error::{param_err, shape_err, Error, Result};

/// What a band holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BandRole {
    Red,
    Green,
    Blue,
    Nir,
    Dsm,
    Ndvi,
    Mask,
    Labels,
}

impl BandRole {
    pub const ALL: [BandRole; 8] = [
        BandRole::Red,
        BandRole::Green,
        BandRole::Blue,
        BandRole::Nir,
        BandRole::Dsm,
        BandRole::Ndvi,
        BandRole::Mask,
        BandRole::Labels,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            BandRole::Red => "RED",
            BandRole::Green => "GREEN",
            BandRole::Blue => "BLUE",
            BandRole::Nir => "NIR",
            BandRole::Dsm => "DSM",
            BandRole::Ndvi => "NDVI",
            BandRole::Mask => "MASK",
            BandRole::Labels => "LABELS",
        }
    }

    /// Categorical bands are never rescaled.
    pub fn is_categorical(self) -> bool {
        matches!(self, BandRole::Mask | BandRole::Labels)
    }
}

impl fmt::Display for BandRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BandRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BandRole::ALL
            .into_iter()
            .find(|r| r.tag() == s)
            .ok_or_else(|| Error::Format(format!("unknown band role {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub role: BandRole,
    /// Row-major `height * width` values.
    pub data: Vec<f32>,
}

/// Co-registered single-precision bands sharing one pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    width: usize,
    height: usize,
    /// Ground sampling distance, length units per pixel.
    gsd: f32,
    bands: Vec<Band>,
}

impl RasterStack {
    pub fn new(width: usize, height: usize, gsd: f32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(param_err!("raster must be non-empty, got {width}x{height}"));
        }
        width
            .checked_mul(height)
            .ok_or_else(|| param_err!("raster {width}x{height} overflows"))?;
        Ok(Self {
            width,
            height,
            gsd,
            bands: Vec::new(),
        })
    }

    /// Appends a band. Fails on a size mismatch, a duplicate role, or a
    /// non-binary mask.
    pub fn push_band(&mut self, role: BandRole, data: Vec<f32>) -> Result<()> {
        if data.len() != self.width * self.height {
            return Err(shape_err!(
                "band {role} has {} values, raster is {}x{}",
                data.len(),
                self.width,
                self.height
            ));
        }
        if self.band(role).is_some() {
            return Err(param_err!("raster already has a {role} band"));
        }
        if role == BandRole::Mask && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(param_err!("MASK band values must be 0 or 1"));
        }
        self.bands.push(Band { role, data });
        Ok(())
    }

    pub fn with_band(mut self, role: BandRole, data: Vec<f32>) -> Result<Self> {
        self.push_band(role, data)?;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gsd(&self) -> f32 {
        self.gsd
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn roles(&self) -> Vec<BandRole> {
        self.bands.iter().map(|b| b.role).collect()
    }

    pub fn band(&self, role: BandRole) -> Option<&[f32]> {
        self.bands.iter().find(|b| b.role == role).map(|b| b.data.as_slice())
    }

    pub fn require(&self, role: BandRole) -> Result<&[f32]> {
        self.band(role)
            .ok_or_else(|| param_err!("raster has no {role} band"))
    }

    pub fn remove_band(&mut self, role: BandRole) -> Option<Vec<f32>> {
        let i = self.bands.iter().position(|b| b.role == role)?;
        Some(self.bands.remove(i).data)
    }

    /// Copy of the `w x h` window whose top-left pixel is `(x, y)`.
    pub fn window(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(shape_err!(
                "window {w}x{h} at ({x}, {y}) exceeds {}x{}",
                self.width,
                self.height
            ));
        }
        let bands = self
            .bands
            .iter()
            .map(|b| Band {
                role: b.role,
                data: (y..y + h)
                    .flat_map(|row| &b.data[row * self.width + x..row * self.width + x + w])
                    .copied()
                    .collect(),
            })
            .collect();
        Ok(Self {
            width: w,
            height: h,
            gsd: self.gsd,
            bands,
        })
    }
}

/// Appends `NDVI = (NIR - RED) / (NIR + RED + 1e-12)`, clamped to `[-1, 1]`.
pub fn compute_ndvi(stack: &RasterStack) -> Result<RasterStack> {
    let red = stack.require(BandRole::Red)?;
    let nir = stack.require(BandRole::Nir)?;
    let ndvi = red
        .iter()
        .zip(nir)
        .map(|(&r, &n)| {
            let (r, n) = (r as f64, n as f64);
            ((n - r) / (n + r + 1e-12)).clamp(-1.0, 1.0) as f32
        })
        .collect();
    stack.clone().with_band(BandRole::Ndvi, ndvi)
}

/// Min/max of one band, used to map it onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRange {
    pub role: BandRole,
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormStats {
    pub ranges: Vec<BandRange>,
}

impl NormStats {
    pub fn get(&self, role: BandRole) -> Option<&BandRange> {
        self.ranges.iter().find(|r| r.role == role)
    }

    /// Widens the ranges to also cover `stack`.
    pub fn include(&mut self, stack: &RasterStack) {
        for band in stack.bands().iter().filter(|b| !b.role.is_categorical()) {
            let (lo, hi) = min_max(&band.data);
            match self.ranges.iter_mut().find(|r| r.role == band.role) {
                Some(r) => {
                    r.min = r.min.min(lo);
                    r.max = r.max.max(hi);
                }
                None => self.ranges.push(BandRange {
                    role: band.role,
                    min: lo,
                    max: hi,
                }),
            }
        }
    }

    pub fn of(stack: &RasterStack) -> Self {
        let mut s = Self::default();
        s.include(stack);
        s
    }

    /// `ROLE=min,max` entries separated by `;`, with values printed so they
    /// parse back to the same bits.
    pub fn to_text(&self) -> String {
        self.ranges
            .iter()
            .map(|r| format!("{}={:?},{:?}", r.role, r.min, r.max))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut ranges = Vec::new();
        for entry in s.split(';').filter(|e| !e.is_empty()) {
            let bad = || Error::Format(format!("bad normalization entry {entry:?}"));
            let (role, vals) = entry.split_once('=').ok_or_else(bad)?;
            let (lo, hi) = vals.split_once(',').ok_or_else(bad)?;
            ranges.push(BandRange {
                role: role.parse()?,
                min: lo.parse().map_err(|_| bad())?,
                max: hi.parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { ranges })
    }
}

fn min_max(data: &[f32]) -> (f32, f32) {
    data.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Maps every non-categorical band onto `[0, 1]` with
/// `(x - min) / (max - min + 1e-12)`.
///
/// With `stats` given, those ranges are used (values outside them clamp);
/// otherwise the stack's own ranges are computed. The ranges used are
/// returned either way.
pub fn normalize(stack: &RasterStack, stats: Option<&NormStats>) -> Result<(RasterStack, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::of(stack),
    };
    let mut out = stack.clone();
    for band in out.bands.iter_mut().filter(|b| !b.role.is_categorical()) {
        let r = stats
            .get(band.role)
            .ok_or_else(|| param_err!("no normalization range for band {}", band.role))?;
        let (lo, span) = (r.min as f64, r.max as f64 - r.min as f64 + 1e-12);
        for v in &mut band.data {
            *v = ((*v as f64 - lo) / span).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((out, stats))
}
