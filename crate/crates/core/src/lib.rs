//! Two-body structure from motion.
//!
//! Takes per-take sparse reconstructions of a scene where a foreground object
//! moves in front of a static background between takes, segments every point
//! into background, foreground or unknown, and merges all takes into one
//! consistent two-body model.

// `!(x > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grouping;
pub mod merging;
pub mod pipeline;
pub mod registration;
pub mod scene;
pub mod segmentation;
pub mod simulator;
mod text;
pub mod tracks;

pub use error::{Error, GeometryError, Result};
