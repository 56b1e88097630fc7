//! Localization-aided spacecraft pose estimation.
//!
//! A two-stage pipeline estimating the full 6DoF pose of a known target
//! from a single monocular image:
//!
//! 1. A translation module regresses the metric translation `t = (x, y, z)`
//!    while an auxiliary localization decoder predicts a heatmap over the
//!    image whose DSNT expectation is the target's centre pixel.
//! 2. The predicted centre and depth define a square bounding box
//!    (`side = K_O / z`); the crop is rescaled and fed to an orientation
//!    network that regresses a unit quaternion.
//!
//! The crate ships the numeric core (gradient-checked losses and
//! transforms), a small define-by-run autodiff engine, the networks, a
//! deterministic synthetic dataset generator, the training loop with
//! checkpointing, and evaluation/report tooling. Everything runs in f64
//! on CPU with seeded determinism end to end.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod evaluation;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod losses;
pub mod network;
pub mod nn;
pub mod roi;
pub mod training;

pub use error::{Error, Result};
