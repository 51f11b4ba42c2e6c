//! Video object segmentation with bilateral attention in a joint
//! motion-appearance neighbourhood, at desk scale.
//!
//! * [`attention`]: bilateral encoding, rank-window masks and the attention
//!   kernels (dense exact, additive, windowed, multi-head).
//! * [`flow`]: flow fields, mask-guided calibration network, flow metrics and
//!   file formats.
//! * [`model`]: encoders, bilateral transformer blocks, decoder and the
//!   sequence propagation loop.
//! * [`synthetic`]: deterministic moving-shape sequences with ground-truth
//!   masks and flow.
//! * [`metrics`]: region similarity `J`, boundary accuracy `F` and `J&F`.
//! * [`train`]: losses, AdamW with EMA and the trainers.
//! * [`harness`]: the ablation runner, the attention benchmark and the
//!   gradient-check battery.

pub mod attention;
mod error;
pub mod flow;
mod grid;
pub mod harness;
pub mod image_io;
mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod train;

pub use error::{CoreError, Result};
pub use grid::TokenGrid;
