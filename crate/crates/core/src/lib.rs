//! Self-supervised speckle noise removal without clean targets.
//!
//! Pipeline: speckle synthesis and adaptive noise mixtures ([`noise`]),
//! image ingestion ([`data`]), a ResUNet encoder with a convolutional
//! reconstruction head ([`model`]), dual-path agreement training
//! ([`train`]), and PSNR / latent-robustness evaluation ([`eval`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod noise;
pub mod plot;
pub mod seed;
pub mod tensor;
pub mod train;

pub use data::{DatasetSplit, ImageTensor};
pub use error::{Error, Result};
pub use model::{ImageScale, LatentMap, ModelConfig, ModelParameters};
pub use noise::{NoiseField, NoiseSpec};
