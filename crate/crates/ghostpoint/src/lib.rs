//! Coarse-to-fine 3D ghost-point detection of 6-DoF end-effector keyposes.
//!
//! The library lifts multi-view RGB-D images into a 3D feature cloud, samples
//! candidate ("ghost") points in progressively tighter neighborhoods, scores
//! them against the scene with relative rotary cross-attention, and decodes
//! the best candidate into a full gripper keypose (position, orientation,
//! open/close and collision-avoidance bits).
//!
//! Core numerics are generic over the scalar type via [`scalar::Scalar`];
//! training runs in `f64` (see the [`Real`] alias) so finite-difference
//! gradient checks have headroom.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod geom;
pub mod ghost;
pub mod gradcheck;
pub mod keypose;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod policy;
pub mod rotary;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod util;

/// Scalar type used by training, inference, and all file formats.
pub type Real = f64;

pub type Vec3r = geom::Vec3<Real>;
pub type Quatr = geom::Quat<Real>;
pub type Mat3r = geom::Mat3<Real>;
pub type Camerar = geom::Camera<Real>;
