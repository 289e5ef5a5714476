//! Pose recovery from geometric representations.
//!
//! A camera pose is recovered from two per-patch representations regressed
//! upstream: a field of world-frame ray directions (which carries rotation
//! only) and a unit-distance pointmap (which carries rotation and
//! translation). Rotation comes from aligning the rays to their canonical
//! camera-frame counterparts, translation from rigidly registering the
//! points. Both solvers are closed-form SVD alignments with analytic
//! backward passes.
//!
//! Modules:
//! - [`geometry`]: rotations, poses, SO(3) distance, seeded sampling.
//! - [`camera`]: pinhole intrinsics, patch grid, canonical rays and points.
//! - [`solver`]: Kabsch rotation, rigid alignment, decoupled recovery.
//! - [`grad`]: VJPs through the solvers and a finite-difference checker.
//! - [`losses`]: pose, geometry, regularization, domain and total losses.
//! - [`instances`]: seeded random solver and loss instances.
//! - [`simulator`]: pose sampling, representation noise, noise trials.

pub mod camera;
pub mod error;
pub mod geometry;
pub mod grad;
pub mod instances;
pub mod losses;
pub mod simulator;
pub mod solver;
pub mod stats;

pub use error::{Branch, GrrError, Result};
