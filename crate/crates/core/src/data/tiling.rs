use super::raster::{BandRole, RasterStack};
use crate::error::{param_err, shape_err, Result};
use crate::superpixel::SuperpixelMap;

#[derive(Debug, Clone)]
pub struct Tile {
    /// Column of the tile's top-left pixel in the source.
    pub x: usize,
    /// Row of the tile's top-left pixel in the source.
    pub y: usize,
    pub stack: RasterStack,
    pub superpixels: Option<SuperpixelMap>,
}

/// Square windows cut from one raster, in row-major order of their origins.
#[derive(Debug, Clone)]
pub struct TileSet {
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub stride: usize,
    pub tiles: Vec<Tile>,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Tile origins that `tile` produces for these dimensions.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        grid_origins(self.width, self.height, self.window, self.stride)
    }
}

fn grid_origins(width: usize, height: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let ys = (0..=(height - window) / stride).map(|i| i * stride);
    ys.flat_map(|y| (0..=(width - window) / stride).map(move |i| (i * stride, y)))
        .collect()
}

/// Checks the tiling preconditions and returns the number of tiles.
pub fn tile_count(width: usize, height: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(param_err!("window and stride must be at least 1"));
    }
    if window > width || window > height {
        return Err(param_err!("window {window} exceeds raster {width}x{height}"));
    }
    for (name, dim) in [("width", width), ("height", height)] {
        if (dim - window) % stride != 0 {
            return Err(param_err!(
                "{name} {dim} minus window {window} is not divisible by stride {stride}"
            ));
        }
    }
    Ok(((height - window) / stride + 1) * ((width - window) / stride + 1))
}

/// Cuts `stack` into `window x window` tiles spaced `stride` apart. There is
/// no padding: dimensions that do not fit the grid exactly are an error.
pub fn tile(stack: &RasterStack, window: usize, stride: usize) -> Result<TileSet> {
    let (w, h) = (stack.width(), stack.height());
    tile_count(w, h, window, stride)?;
    let tiles = grid_origins(w, h, window, stride)
        .into_iter()
        .map(|(x, y)| {
            Ok(Tile {
                x,
                y,
                stack: stack.window(x, y, window, window)?,
                superpixels: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TileSet {
        width: w,
        height: h,
        window,
        stride,
        tiles,
    })
}

/// Reassembles a tile set into one raster.
///
/// Where tiles overlap, real-valued bands take the mean of all
/// contributions and MASK takes the majority (mean of at least 0.5 gives 1).
/// LABELS bands cannot be stitched from overlapping tiles.
pub fn stitch(set: &TileSet) -> Result<RasterStack> {
    let expected = tile_count(set.width, set.height, set.window, set.stride)?;
    if set.tiles.len() != expected {
        return Err(shape_err!(
            "tile set has {} tiles, the {}x{} grid needs {expected}",
            set.tiles.len(),
            set.width,
            set.height
        ));
    }
    let first = &set.tiles[0].stack;
    let roles = first.roles();
    let overlapping = set.stride < set.window;
    if overlapping && roles.contains(&BandRole::Labels) {
        return Err(param_err!("LABELS bands cannot be stitched from overlapping tiles"));
    }
    for (t, (x, y)) in set.tiles.iter().zip(set.origins()) {
        if (t.x, t.y) != (x, y) {
            return Err(shape_err!("tile at ({}, {}) where ({x}, {y}) was expected", t.x, t.y));
        }
        if t.stack.width() != set.window || t.stack.height() != set.window {
            return Err(shape_err!(
                "tile at ({x}, {y}) is {}x{}, window is {}",
                t.stack.width(),
                t.stack.height(),
                set.window
            ));
        }
        if t.stack.roles() != roles {
            return Err(shape_err!("tile at ({x}, {y}) has bands {:?}, expected {roles:?}", t.stack.roles()));
        }
    }

    let (w, win) = (set.width, set.window);
    let mut hits = vec![0u32; w * set.height];
    for t in &set.tiles {
        for r in 0..win {
            for h in &mut hits[(t.y + r) * w + t.x..(t.y + r) * w + t.x + win] {
                *h += 1;
            }
        }
    }

    let mut out = RasterStack::new(w, set.height, first.gsd())?;
    for role in roles {
        let data = if overlapping {
            let mut acc = vec![0f64; w * set.height];
            for t in &set.tiles {
                let src = t.stack.require(role)?;
                for r in 0..win {
                    let row = &mut acc[(t.y + r) * w + t.x..(t.y + r) * w + t.x + win];
                    for (a, &v) in row.iter_mut().zip(&src[r * win..(r + 1) * win]) {
                        *a += v as f64;
                    }
                }
            }
            acc.iter()
                .zip(&hits)
                .map(|(&a, &n)| {
                    let mean = a / n as f64;
                    if role == BandRole::Mask {
                        if mean >= 0.5 { 1.0 } else { 0.0 }
                    } else {
                        mean as f32
                    }
                })
                .collect()
        } else {
            let mut data = vec![0f32; w * set.height];
            for t in &set.tiles {
                let src = t.stack.require(role)?;
                for r in 0..win {
                    data[(t.y + r) * w + t.x..(t.y + r) * w + t.x + win]
                        .copy_from_slice(&src[r * win..(r + 1) * win]);
                }
            }
            data
        };
        out.push_band(role, data)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, seed: u64) -> RasterStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = RasterStack::new(w, h, 0.5).unwrap();
        for role in [BandRole::Red, BandRole::Dsm] {
            s.push_band(role, (0..w * h).map(|_| rng.gen()).collect()).unwrap();
        }
        s.push_band(BandRole::Mask, (0..w * h).map(|_| rng.gen_range(0..2) as f32).collect())
            .unwrap();
        s
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile_count(1024, 1024, 128, 128).unwrap(), 64);
        assert_eq!(tile_count(128, 128, 128, 128).unwrap(), 1);
        assert!(tile_count(1000, 1000, 128, 128).is_err());
        assert!(tile_count(64, 64, 128, 128).is_err());
        assert!(tile_count(64, 64, 32, 0).is_err());
        assert_eq!(tile_count(96, 64, 32, 16).unwrap(), 5 * 3);
    }

    #[test]
    fn tiles_are_row_major() {
        let set = tile(&random(96, 64, 0), 32, 32).unwrap();
        let origins: Vec<_> = set.tiles.iter().map(|t| (t.x, t.y)).collect();
        assert_eq!(origins, vec![(0, 0), (32, 0), (64, 0), (0, 32), (32, 32), (64, 32)]);
    }

    #[test]
    fn single_tile_is_the_input() {
        let s = random(16, 16, 1);
        let set = tile(&s, 16, 16).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.tiles[0].stack, s);
        assert_eq!(stitch(&set).unwrap(), s);
    }

    #[test]
    fn stitch_inverts_tile() {
        let s = random(96, 64, 2);
        assert_eq!(stitch(&tile(&s, 32, 32).unwrap()).unwrap(), s);
        assert_eq!(stitch(&tile(&s, 32, 16).unwrap()).unwrap().band(BandRole::Mask), s.band(BandRole::Mask));
    }

    #[test]
    fn overlapping_constant_tiles_average_to_the_constant() {
        let v = 0.37f32;
        let s = RasterStack::new(64, 64, 1.0)
            .unwrap()
            .with_band(BandRole::Red, vec![v; 64 * 64])
            .unwrap();
        let out = stitch(&tile(&s, 32, 16).unwrap()).unwrap();
        assert!(out.band(BandRole::Red).unwrap().iter().all(|&x| (x - v).abs() < 1e-7));
    }

    #[test]
    fn stitch_rejects_missing_tiles() {
        let mut set = tile(&random(64, 64, 3), 32, 32).unwrap();
        set.tiles.pop();
        assert!(stitch(&set).is_err());
    }
}
