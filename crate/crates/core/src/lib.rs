//! Self-supervised adversarial hardening of a small monocular depth network.
//!
//! The pipeline: [`scene`] stamps a planar object board into a stereo
//! background pair, [`adversary`] optimizes sparse perturbations of the board
//! against a [`model::DepthNet`], and [`trainer`] hardens the network by
//! reconstructing the target view from the source view through the depth it
//! predicts on the perturbed image. [`eval`] measures the damage.

pub mod adversary;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod model;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
