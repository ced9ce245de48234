//! Semantic segmentation of microvasculature in histology tiles, built from
//! first principles.
//!
//! The pipeline runs polygon annotations through rasterized binary masks into
//! U-Net / FPN models trained with Dice, weighted cross-entropy or focal loss,
//! and scores predictions with IoU and Dice. Every numerical piece can be
//! checked against an independent route: the rasterizer against a
//! point-in-polygon oracle, the autodiff engine against central differences,
//! the metrics against their algebraic identities.
//!
//! Modules, bottom-up:
//!
//! - [`annot`]: annotation file parsing, filtering and train/val splitting
//! - [`raster`]: polygon to mask conversion under a pixel-center even-odd rule
//! - [`imgproc`]: image decoding, bilinear resize, normalization, synthetic data
//! - [`tensor`]: dense arrays and a reverse-mode tape
//! - [`nn`]: encoder / decoder assembly and the weight file format
//! - [`loss`]: Dice, weighted cross-entropy, focal and plain BCE
//! - [`metrics`]: thresholding, confusion counts, IoU / Dice reports
//! - [`train`]: optimizers, learning-rate range test, training loop
//!
//! Data-parallel inner loops (per-sample convolution, per-tile rasterization,
//! per-image evaluation) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! identical either way.

pub mod annot;
pub mod error;
pub mod imgproc;
mod interp;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod raster;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
