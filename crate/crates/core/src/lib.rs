//! Atlas-guided customization of 3D segmentation backends.
//!
//! One annotated atlas (image + label) is registered to a query volume
//! (rigid, affine, then a dense displacement field). The warped label is
//! turned into click / box / mask prompts for a segmentation backend, and the
//! backend output is fused with the warped atlas through a per-voxel gain
//! fitted at test time.
//!
//! This crate is `no_std` + `alloc`: every operation is a pure function over
//! in-memory grids. File formats, external processes and the command line
//! live in the companion `atlasfuse` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;
mod math;

pub mod backend;
pub mod fusion;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod prompting;
pub mod registration;
pub mod volume;
pub mod xform;

pub use error::{Error, Result};
pub use math::{Mat3, Vec3};
pub use volume::{Geometry, LabelMask, ProbMask, Volume};
