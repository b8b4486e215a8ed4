//! SLIC superpixels: localized k-means over joint feature and position
//! space, followed by connectivity enforcement.
//!
//! Features are any `[h, w, d]` tensor whose channels share a comparable
//! scale; distances combine the Euclidean feature distance with the spatial
//! distance weighted by `compactness / grid_step`.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    /// Target number of superpixels.
    pub k_desired: usize,
    /// Weight of spatial proximity against feature similarity.
    pub compactness: f64,
    pub max_iters: usize,
    /// Components smaller than `min_size_factor * h * w / k_desired` pixels
    /// are merged into a neighbour.
    pub min_size_factor: f64,
}

impl SlicParams {
    /// `compactness = 10`, `max_iters = 10`, `min_size_factor = 0.25`.
    pub fn new(k_desired: usize) -> Self {
        Self {
            k_desired,
            compactness: 10.0,
            max_iters: 10,
            min_size_factor: 0.25,
        }
    }

    pub fn with_compactness(mut self, m: f64) -> Self {
        self.compactness = m;
        self
    }

    fn validate(&self, pixels: usize) -> Result<()> {
        if self.k_desired == 0 || self.k_desired > pixels {
            return Err(param_err!(
                "superpixel count {} must be in 1..={pixels}",
                self.k_desired
            ));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return Err(param_err!("compactness must be positive, got {}", self.compactness));
        }
        if self.max_iters == 0 {
            return Err(param_err!("max_iters must be positive"));
        }
        if !(self.min_size_factor > 0.0 && self.min_size_factor <= 1.0) {
            return Err(param_err!(
                "min_size_factor must be in (0, 1], got {}",
                self.min_size_factor
            ));
        }
        Ok(())
    }

    pub fn min_size(&self, pixels: usize) -> usize {
        ((self.min_size_factor * pixels as f64 / self.k_desired as f64).round() as usize).max(1)
    }
}

/// Dense per-pixel labels `0..count` plus per-label statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    count: usize,
    pixel_counts: Vec<usize>,
    feature_dim: usize,
    /// `[count, feature_dim]` row-major; empty when `feature_dim == 0`.
    feature_means: Vec<f64>,
}

impl SuperpixelMap {
    /// Builds a map from raw labels, which must cover `0..max+1` with every
    /// label used at least once.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(param_err!("superpixel map must be non-empty"));
        }
        if labels.len() != width * height {
            return Err(shape_err!(
                "{} labels for a {width}x{height} map",
                labels.len()
            ));
        }
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut pixel_counts = vec![0usize; count];
        for &l in &labels {
            pixel_counts[l as usize] += 1;
        }
        if let Some(empty) = pixel_counts.iter().position(|&c| c == 0) {
            return Err(param_err!("label {empty} has no pixels"));
        }
        Ok(Self {
            width,
            height,
            labels,
            count,
            pixel_counts,
            feature_dim: 0,
            feature_means: Vec::new(),
        })
    }

    /// Single superpixel covering every pixel.
    pub fn uniform(width: usize, height: usize) -> Self {
        Self::from_labels(width, height, vec![0; width * height]).expect("non-empty")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn pixel_counts(&self) -> &[usize] {
        &self.pixel_counts
    }

    /// Mean feature vector of label `s`, if statistics were attached.
    pub fn feature_mean(&self, s: usize) -> Option<&[f64]> {
        (self.feature_dim > 0).then(|| &self.feature_means[s * self.feature_dim..][..self.feature_dim])
    }

    /// Attaches per-label feature means computed from `features`.
    pub fn with_feature_stats<T: Real>(mut self, features: &Tensor<T>) -> Result<Self> {
        let means = superpixel_mean(&self, features)?;
        self.feature_dim = means.shape()[1];
        self.feature_means = means.data().iter().map(|v| v.as_f64()).collect();
        Ok(self)
    }
}

// ── SLIC ────────────────────────────────────────────────────────────

/// A cluster center in joint feature / position space.
#[derive(Debug, Clone, PartialEq)]
pub struct Center {
    pub x: f64,
    pub y: f64,
    pub feature: Vec<f64>,
}

/// Per-iteration record of a SLIC run.
#[derive(Debug, Clone, Default)]
pub struct SlicTrace {
    /// Sum over centers of the spatial distance each moved, per iteration.
    pub displacements: Vec<f64>,
}

/// Dense `f64` view of an `[h, w, d]` feature tensor.
struct Features {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl Features {
    fn new<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [h, w, d] = *t.shape() else {
            return Err(shape_err!("features must be [h, w, d], got {:?}", t.shape()));
        };
        Ok(Self {
            h,
            w,
            d,
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        })
    }

    fn at(&self, x: usize, y: usize) -> &[f64] {
        &self.data[(y * self.w + x) * self.d..][..self.d]
    }

    /// Squared gradient magnitude used to nudge seeds off edges.
    fn gradient(&self, x: usize, y: usize) -> f64 {
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(self.w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(self.h - 1));
        sq_dist(self.at(xr, y), self.at(xl, y)) + sq_dist(self.at(x, yd), self.at(x, yu))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `sqrt(h * w / k)`.
pub fn grid_step(height: usize, width: usize, k: usize) -> f64 {
    ((height * width) as f64 / k as f64).sqrt()
}

/// Seeds on a regular grid of roughly `grid_step` spacing, each moved to the
/// lowest-gradient pixel of its 3x3 neighbourhood when that is strictly
/// lower than the seed's own pixel.
pub fn initial_centers<T: Real>(features: &Tensor<T>, params: &SlicParams) -> Result<Vec<Center>> {
    let f = Features::new(features)?;
    params.validate(f.h * f.w)?;
    Ok(seed_centers(&f, params))
}

fn seed_centers(f: &Features, params: &SlicParams) -> Vec<Center> {
    let step = grid_step(f.h, f.w, params.k_desired);
    let nx = ((f.w as f64 / step).round() as usize).clamp(1, f.w);
    let ny = ((f.h as f64 / step).round() as usize).clamp(1, f.h);
    let (sx, sy) = (f.w as f64 / nx as f64, f.h as f64 / ny as f64);

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let gx = (i as f64 + 0.5) * sx - 0.5;
            let gy = (j as f64 + 0.5) * sy - 0.5;
            let (px, py) = (gx.round() as usize, gy.round() as usize);

            let mut best = (f.gradient(px, py), None);
            for ny_ in py.saturating_sub(1)..=(py + 1).min(f.h - 1) {
                for nx_ in px.saturating_sub(1)..=(px + 1).min(f.w - 1) {
                    let g = f.gradient(nx_, ny_);
                    if g < best.0 {
                        best = (g, Some((nx_, ny_)));
                    }
                }
            }
            let (x, y, pix) = match best.1 {
                Some((bx, by)) => (bx as f64, by as f64, (bx, by)),
                None => (gx, gy, (px, py)),
            };
            centers.push(Center {
                x,
                y,
                feature: f.at(pix.0, pix.1).to_vec(),
            });
        }
    }
    centers
}

/// One assignment pass: every pixel goes to the center minimizing
/// `d_feat^2 + (m / step)^2 * d_xy^2` among centers whose `2 * step` square
/// window contains it. Ties go to the lower center index. Pixels outside
/// every window fall back to the globally nearest center.
pub fn assign<T: Real>(features: &Tensor<T>, centers: &[Center], step: f64, compactness: f64) -> Result<Vec<u32>> {
    let f = Features::new(features)?;
    if centers.is_empty() {
        return Err(param_err!("no centers to assign to"));
    }
    Ok(assign_pixels(&f, centers, step, compactness))
}

fn center_distance(f: &Features, c: &Center, x: usize, y: usize, spatial_w: f64) -> f64 {
    let dx = x as f64 - c.x;
    let dy = y as f64 - c.y;
    sq_dist(f.at(x, y), &c.feature) + spatial_w * (dx * dx + dy * dy)
}

fn assign_pixels(f: &Features, centers: &[Center], step: f64, compactness: f64) -> Vec<u32> {
    let spatial_w = (compactness / step).powi(2);
    let reach = 2.0 * step;
    let mut best = vec![f64::INFINITY; f.h * f.w];
    let mut labels = vec![u32::MAX; f.h * f.w];
    for (k, c) in centers.iter().enumerate() {
        let x0 = (c.x - reach).ceil().max(0.0) as usize;
        let y0 = (c.y - reach).ceil().max(0.0) as usize;
        let x1 = ((c.x + reach).floor() as isize).min(f.w as isize - 1);
        let y1 = ((c.y + reach).floor() as isize).min(f.h as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let d = center_distance(f, c, x, y, spatial_w);
                let p = y * f.w + x;
                if d < best[p] {
                    best[p] = d;
                    labels[p] = k as u32;
                }
            }
        }
    }
    for p in 0..labels.len() {
        if labels[p] == u32::MAX {
            let (x, y) = (p % f.w, p / f.w);
            let nearest = centers
                .iter()
                .map(|c| center_distance(f, c, x, y, spatial_w))
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (k, d)| if d < acc.1 { (k, d) } else { acc });
            labels[p] = nearest.0 as u32;
        }
    }
    labels
}

/// Moves every non-empty cluster's center to the mean of its pixels and
/// returns the total spatial displacement.
fn update_centers(f: &Features, labels: &[u32], centers: &mut [Center]) -> f64 {
    let k = centers.len();
    let mut sums = vec![0.0; k * (f.d + 2)];
    let mut counts = vec![0usize; k];
    for (p, &l) in labels.iter().enumerate() {
        let l = l as usize;
        let row = &mut sums[l * (f.d + 2)..][..f.d + 2];
        row[0] += (p % f.w) as f64;
        row[1] += (p / f.w) as f64;
        for (s, v) in row[2..].iter_mut().zip(f.at(p % f.w, p / f.w)) {
            *s += v;
        }
        counts[l] += 1;
    }
    let mut moved = 0.0;
    for (i, c) in centers.iter_mut().enumerate() {
        if counts[i] == 0 {
            continue;
        }
        let n = counts[i] as f64;
        let row = &sums[i * (f.d + 2)..][..f.d + 2];
        let (x, y) = (row[0] / n, row[1] / n);
        moved += ((x - c.x).powi(2) + (y - c.y).powi(2)).sqrt();
        c.x = x;
        c.y = y;
        for (cf, s) in c.feature.iter_mut().zip(&row[2..]) {
            *cf = s / n;
        }
    }
    moved
}

/// Segments `features` (`[h, w, d]`) into roughly `k_desired` connected
/// superpixels.
pub fn slic_segment<T: Real>(features: &Tensor<T>, params: &SlicParams) -> Result<SuperpixelMap> {
    slic_segment_traced(features, params).map(|(m, _)| m)
}

/// [`slic_segment`] that also reports per-iteration center movement.
pub fn slic_segment_traced<T: Real>(
    features: &Tensor<T>,
    params: &SlicParams,
) -> Result<(SuperpixelMap, SlicTrace)> {
    let f = Features::new(features)?;
    params.validate(f.h * f.w)?;
    let step = grid_step(f.h, f.w, params.k_desired);
    let mut centers = seed_centers(&f, params);
    let mut trace = SlicTrace::default();

    let mut labels = assign_pixels(&f, &centers, step, params.compactness);
    for iter in 0..params.max_iters {
        let moved = update_centers(&f, &labels, &mut centers);
        trace.displacements.push(moved);
        if moved < 1e-3 || iter + 1 == params.max_iters {
            break;
        }
        labels = assign_pixels(&f, &centers, step, params.compactness);
    }

    let raw = dense_relabel(f.w, f.h, &labels);
    let map = enforce_connectivity(&raw, params.min_size(f.h * f.w));
    Ok((map.with_feature_stats(features)?, trace))
}

fn dense_relabel(width: usize, height: usize, labels: &[u32]) -> SuperpixelMap {
    let mut remap = std::collections::HashMap::new();
    let dense = labels
        .iter()
        .map(|&l| {
            let next = remap.len() as u32;
            *remap.entry(l).or_insert(next)
        })
        .collect();
    SuperpixelMap::from_labels(width, height, dense).expect("dense labels")
}

// ── connectivity ────────────────────────────────────────────────────

/// 4-connected components of equal labels, numbered in row-major order of
/// first appearance. Returns the component id per pixel and the count.
pub fn connected_components(width: usize, height: usize, labels: &[u32]) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % width, p / width);
            let neighbours = [
                (x > 0).then(|| p - 1),
                (x + 1 < width).then(|| p + 1),
                (y > 0).then(|| p - width),
                (y + 1 < height).then(|| p + width),
            ];
            for q in neighbours.into_iter().flatten() {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    (comp, next)
}

/// Splits every label into its 4-connected components and merges components
/// smaller than `min_size` into their largest neighbouring component (ties
/// toward the lowest original label). Output labels are renumbered densely
/// in row-major order of first appearance.
pub fn enforce_connectivity(map: &SuperpixelMap, min_size: usize) -> SuperpixelMap {
    let (w, h) = (map.width, map.height);
    let (comp, n) = connected_components(w, h, &map.labels);

    let mut size = vec![0usize; n];
    let mut label_of = vec![0u32; n];
    for (p, &c) in comp.iter().enumerate() {
        size[c] += 1;
        label_of[c] = map.labels[p];
    }
    let mut adjacent: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for p in 0..comp.len() {
        let (x, y) = (p % w, p / w);
        for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)].into_iter().flatten() {
            if comp[p] != comp[q] {
                adjacent[comp[p]].insert(comp[q]);
                adjacent[comp[q]].insert(comp[p]);
            }
        }
    }

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut c: usize) -> usize {
        while parent[c] != c {
            parent[c] = parent[parent[c]];
            c = parent[c];
        }
        c
    }

    loop {
        let mut merged = false;
        for c in 0..n {
            if find(&mut parent, c) != c || size[c] >= min_size {
                continue;
            }
            let neighbours: BTreeSet<usize> = adjacent[c]
                .iter()
                .map(|&a| find(&mut parent, a))
                .filter(|&a| a != c)
                .collect();
            let Some(target) = neighbours
                .into_iter()
                .min_by_key(|&a| (std::cmp::Reverse(size[a]), label_of[a], a))
            else {
                continue;
            };
            parent[c] = target;
            size[target] += size[c];
            let moved = std::mem::take(&mut adjacent[c]);
            adjacent[target].extend(moved);
            merged = true;
        }
        if !merged {
            break;
        }
    }

    let merged: Vec<u32> = comp.iter().map(|&c| find(&mut parent, c) as u32).collect();
    dense_relabel(w, h, &merged)
}

// ── aggregation ─────────────────────────────────────────────────────

/// Mean feature vector of every superpixel, `[S, d]`.
pub fn superpixel_mean<T: Real>(map: &SuperpixelMap, features: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w, d] = *features.shape() else {
        return Err(shape_err!("features must be [h, w, d], got {:?}", features.shape()));
    };
    if (h, w) != (map.height, map.width) {
        return Err(shape_err!(
            "features are {w}x{h}, superpixel map is {}x{}",
            map.width,
            map.height
        ));
    }
    let mut sums = vec![0.0f64; map.count * d];
    for (p, &l) in map.labels.iter().enumerate() {
        let row = &mut sums[l as usize * d..][..d];
        for (s, v) in row.iter_mut().zip(&features.data()[p * d..][..d]) {
            *s += v.as_f64();
        }
    }
    let data = sums
        .chunks(d)
        .zip(&map.pixel_counts)
        .flat_map(|(row, &n)| row.iter().map(move |s| T::of(s / n as f64)))
        .collect();
    Tensor::new(&[map.count, d], data)
}

/// Paints every pixel with its superpixel's value.
pub fn broadcast_labels<V: Copy>(map: &SuperpixelMap, per_superpixel: &[V]) -> Result<Vec<V>> {
    if per_superpixel.len() != map.count {
        return Err(shape_err!(
            "{} values for {} superpixels",
            per_superpixel.len(),
            map.count
        ));
    }
    Ok(map.labels.iter().map(|&l| per_superpixel[l as usize]).collect())
}

/// Pixels with a 4-neighbour carrying a different value.
pub fn boundary_pixels<L: PartialEq>(width: usize, height: usize, labels: &[L]) -> Vec<bool> {
    (0..labels.len())
        .map(|p| {
            let (x, y) = (p % width, p / width);
            [
                (x > 0).then(|| p - 1),
                (x + 1 < width).then(|| p + 1),
                (y > 0).then(|| p - width),
                (y + 1 < height).then(|| p + width),
            ]
            .into_iter()
            .flatten()
            .any(|q| labels[q] != labels[p])
        })
        .collect()
}

/// Fraction of ground-truth boundary pixels that have a superpixel boundary
/// pixel within `tolerance` pixels (Chebyshev distance). 1 when the truth
/// has no boundary.
pub fn boundary_recall<L: PartialEq>(truth: &[L], map: &SuperpixelMap, tolerance: usize) -> Result<f64> {
    let (w, h) = (map.width, map.height);
    if truth.len() != w * h {
        return Err(shape_err!("{} truth pixels for a {w}x{h} map", truth.len()));
    }
    let truth_edges = boundary_pixels(w, h, truth);
    let sp_edges = boundary_pixels(w, h, &map.labels);
    let (mut total, mut hit) = (0usize, 0usize);
    for p in (0..w * h).filter(|&p| truth_edges[p]) {
        total += 1;
        let (x, y) = (p % w, p / w);
        let found = (y.saturating_sub(tolerance)..=(y + tolerance).min(h - 1)).any(|yy| {
            (x.saturating_sub(tolerance)..=(x + tolerance).min(w - 1)).any(|xx| sp_edges[yy * w + xx])
        });
        hit += usize::from(found);
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(w: usize, h: usize, d: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        let mut data = Vec::with_capacity(w * h * d);
        for y in 0..h {
            for x in 0..w {
                for c in 0..d {
                    data.push(f(x, y, c));
                }
            }
        }
        Tensor::new(&[h, w, d], data).unwrap()
    }

    #[test]
    fn constant_image_splits_into_grid() {
        let img = image(32, 32, 1, |_, _, _| 0.5);
        let params = SlicParams::new(4).with_compactness(10.0);
        let map = slic_segment(&img, &params).unwrap();
        assert_eq!(map.count(), 4);
        for &n in map.pixel_counts() {
            assert!((n as f64 - 256.0).abs() <= 25.6, "{n}");
        }
        // Grid aligned: each quadrant carries one label.
        for (qx, qy) in [(0, 0), (16, 0), (0, 16), (16, 16)] {
            let l = map.labels()[qy * 32 + qx];
            for y in qy..qy + 16 {
                for x in qx..qx + 16 {
                    assert_eq!(map.labels()[y * 32 + x], l);
                }
            }
        }
    }

    #[test]
    fn halves_are_never_mixed() {
        let img = image(32, 32, 1, |x, _, _| if x < 16 { 0.0 } else { 1.0 });
        let params = SlicParams::new(8).with_compactness(1.0);
        let map = slic_segment(&img, &params).unwrap();
        for s in 0..map.count() {
            let sides: BTreeSet<bool> = (0..1024)
                .filter(|&p| map.labels()[p] as usize == s)
                .map(|p| p % 32 < 16)
                .collect();
            assert_eq!(sides.len(), 1, "superpixel {s} straddles the halves");
        }
    }

    #[test]
    fn one_assignment_matches_windowed_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let img = Tensor::<f64>::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
            let params = SlicParams::new(rng.gen_range(2..20)).with_compactness(rng.gen_range(0.5..20.0));
            let centers = initial_centers(&img, &params).unwrap();
            let step = grid_step(16, 16, params.k_desired);
            let got = assign(&img, &centers, step, params.compactness).unwrap();

            for y in 0..16 {
                for x in 0..16 {
                    let mut best = (f64::INFINITY, usize::MAX);
                    for (k, c) in centers.iter().enumerate() {
                        if (x as f64 - c.x).abs() > 2.0 * step || (y as f64 - c.y).abs() > 2.0 * step {
                            continue;
                        }
                        let px = &img.data()[(y * 16 + x) * 3..][..3];
                        let df: f64 = px.iter().zip(&c.feature).map(|(a, b)| (a - b).powi(2)).sum();
                        let ds = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                        let d = df + (params.compactness / step).powi(2) * ds;
                        if d < best.0 {
                            best = (d, k);
                        }
                    }
                    assert_eq!(got[y * 16 + x] as usize, best.1);
                }
            }
        }
    }

    #[test]
    fn parameter_errors() {
        let img = image(4, 4, 1, |_, _, _| 0.0);
        assert!(slic_segment(&img, &SlicParams::new(17)).is_err());
        assert!(slic_segment(&img, &SlicParams::new(0)).is_err());
        assert!(slic_segment(&img, &SlicParams::new(2).with_compactness(0.0)).is_err());
        assert!(slic_segment(&Tensor::<f64>::zeros(&[4, 4]), &SlicParams::new(2)).is_err());
    }

    #[test]
    fn connected_map_is_a_fixed_point() {
        let labels = vec![2, 2, 0, 0, 2, 2, 0, 0, 1, 1, 1, 1];
        let map = SuperpixelMap::from_labels(4, 3, labels).unwrap();
        let out = enforce_connectivity(&map, 1);
        assert_eq!(out.labels(), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn islands_split_or_merge_by_size() {
        // Label 0 occupies two islands separated by label 1.
        #[rustfmt::skip]
        let labels = vec![
            0, 0, 1, 0,
            0, 0, 1, 1,
            1, 1, 1, 1,
        ];
        let map = SuperpixelMap::from_labels(4, 3, labels).unwrap();
        let split = enforce_connectivity(&map, 1);
        assert_eq!(split.count(), 3);
        let merged = enforce_connectivity(&map, 2);
        assert_eq!(merged.count(), 2);
        assert_eq!(merged.labels()[3], merged.labels()[2]);
    }

    #[test]
    fn checkerboard_components_reach_min_size() {
        let labels: Vec<u32> = (0..64).map(|p| ((p % 8 + p / 8) % 2) as u32).collect();
        let map = SuperpixelMap::from_labels(8, 8, labels).unwrap();
        let out = enforce_connectivity(&map, 2);
        let (comp, n) = connected_components(8, 8, out.labels());
        assert_eq!(n, out.count());
        let mut sizes = vec![0; n];
        comp.iter().for_each(|&c| sizes[c] += 1);
        assert!(sizes.iter().all(|&s| s >= 2));
    }

    #[test]
    fn mean_and_broadcast() {
        let img = image(4, 4, 2, |_, _, c| c as f64 + 3.0);
        let map = SuperpixelMap::from_labels(4, 4, (0..16).map(|p| (p / 8) as u32).collect()).unwrap();
        let m = superpixel_mean(&map, &img).unwrap();
        assert_eq!(m.data(), &[3.0, 4.0, 3.0, 4.0]);

        let one = SuperpixelMap::uniform(4, 4);
        let ramp = image(4, 4, 1, |x, y, _| (x + 4 * y) as f64);
        assert_eq!(superpixel_mean(&one, &ramp).unwrap().data(), &[7.5]);
        assert_eq!(broadcast_labels(&one, &[7]).unwrap(), vec![7; 16]);
        assert!(broadcast_labels(&one, &[7, 8]).is_err());

        // Mean of a one-hot indicator broadcasts back to the indicator.
        let onehot = image(4, 4, 1, |_, y, _| if y < 2 { 1.0 } else { 0.0 });
        let means = superpixel_mean(&map, &onehot).unwrap();
        let back = broadcast_labels(&map, means.data()).unwrap();
        assert_eq!(back, onehot.data());
    }

    #[test]
    fn invalid_label_maps() {
        assert!(SuperpixelMap::from_labels(2, 2, vec![0, 2, 2, 0]).is_err());
        assert!(SuperpixelMap::from_labels(2, 2, vec![0, 1, 1]).is_err());
    }

    #[test]
    fn recall_of_exact_boundaries_is_one() {
        let truth: Vec<u8> = (0..64).map(|p| u8::from(p % 8 < 3)).collect();
        let map = SuperpixelMap::from_labels(8, 8, truth.iter().map(|&t| t as u32).collect()).unwrap();
        assert_eq!(boundary_recall(&truth, &map, 0).unwrap(), 1.0);
        let one = SuperpixelMap::uniform(8, 8);
        assert_eq!(boundary_recall(&truth, &one, 2).unwrap(), 0.0);
    }
}
