//! Building-footprint extraction from fused optical and elevation rasters.
//!
//! SLIC superpixels are the unit of prediction. An encoder-decoder network
//! embeds every pixel, the embeddings are averaged per superpixel, and two
//! class prototypes compete for each superpixel. Everything from tensors
//! and gradients to file formats is implemented in this crate; the guide in
//! `book/` walks through it.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod competition;
pub mod data;
pub mod error;
mod fsutil;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod superpixel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

/// The guide's code blocks, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/superpixels.md")]
    struct Superpixels;
    #[doc = include_str!("../../../book/src/network.md")]
    struct Network;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
