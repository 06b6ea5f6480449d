//! Template-free animatable volumetric actor pipeline.
//!
//! Canonical neural radiance and skinning fields are deformed into view
//! space by forward linear blend skinning plus a learned non-linear delta;
//! rendering inverts the deformation per sample with Newton root finding,
//! differentiates through the solve implicitly, and composites with
//! ambient-occlusion shading. A procedural capsule actor supplies ground
//! truth for training and evaluation, and a pose-clustering protocol builds
//! the train / in-distribution / out-of-distribution splits.

pub mod config;
pub mod error;
pub mod fields;
pub mod numcore;
pub mod renderer;
pub mod rootfind;
pub mod skeleton;
pub mod splits;
pub mod synth;
pub mod training;

pub use error::{Result, VolactError};
