//! Raster stacks, the BMSR container, tiling, dataset splits and synthetic
//! scenes.

mod bmsr;
mod raster;
mod split;
mod synth;
mod tiling;

pub use bmsr::{decode as decode_bmsr, encode as encode_bmsr, encoded_len, read_bmsr, write_bmsr};
pub use raster::{compute_ndvi, normalize, Band, BandRange, BandRole, NormStats, RasterStack};
pub use split::{split_dataset, Split, SplitSpec};
pub use synth::{synth_scene, Rect, SyntheticScene, SyntheticSceneSpec};
pub use tiling::{stitch, tile, tile_count, Tile, TileSet};
