//! Occlusion-robust 3D face reconstruction from a single image.
//!
//! Stage one detects occluded face pixels from a parsing map and completes
//! them; stage two fits a morphable model and transfers fine-scale detail
//! through an encoded bump map.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bump;
pub mod camera;
pub mod fitting;
pub mod harmonic;
pub mod illumination;
pub mod image;
pub mod io;
pub mod landmarks;
pub mod losses;
pub mod model;
pub mod occlusion;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod verify;
