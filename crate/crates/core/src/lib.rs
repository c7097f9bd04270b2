//! Rank-R feed-forward tensor networks for pixel-wise hyperspectral image
//! classification.
//!
//! The input to the classifier is a small square patch of a hyperspectral
//! cube centered on the pixel of interest, kept in its natural order-3 tensor
//! form. The input-to-hidden weights of the network are constrained to a
//! rank-R canonical-polyadic (CP) form, which cuts the trainable parameter
//! count from `Q·s²·b` to `Q·R·(2s+b)` and lets the model train from very few
//! labeled samples. Gradients are derived analytically and verified against
//! central finite differences.
//!
//! Crate layout:
//!
//! * [`tensor`]: dense order-3 tensors, CP factor sets, and the contraction
//!   kernels that avoid materializing full weight tensors.
//! * [`model`]: the Rank-R network, its cross-entropy objective and
//!   backward pass, a dense (non-factorized) ablation with identical
//!   topology, and model (de)serialization.
//! * [`optim`]: Adam and the mini-batch training loop.
//! * [`data`]: hyperspectral cube / label map I/O, band-wise min-max
//!   normalization, patch extraction, sample pools, and stratified splits.
//! * [`synth`]: a seeded synthetic scene generator with controllable class
//!   separability.
//! * [`harness`]: the experiment engine: seeded TWS×TS grids, repeated
//!   hold-out evaluation, confidence intervals, CSV export, and prediction
//!   map rendering.
//!
//! # Mode convention
//!
//! All order-3 values in this crate, patches and hidden weights alike, use
//! a single spectral-first mode order `(b, s, s)`: the spectral (band) index
//! varies slowest, then the patch row, then the patch column. Conversion from
//! the `(row, col, band)` indexing of a [`data::HyperCube`] happens once, at
//! patch extraction.

mod binio;

pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
