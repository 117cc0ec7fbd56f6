//! Hardware-free robotic auscultation pipeline.
//!
//! * [`geometry`]: rigid transforms, the LiDAR/end-effector/stethoscope
//!   chain and the linearized pose update.
//! * [`pointcloud`]: RGB-D frames, clouds, kd-tree search, filtering, PLY/PNG I/O.
//! * [`registration`]: odometry-seeded multi-way registration with a robust
//!   line process.
//! * [`landmarks`]: nipple/navel detection, body frame and valve landing positions.
//! * [`contact`]: spring + PID constant-force end-effector simulation.
//! * [`scenegen`]: synthetic torso, virtual depth camera and capture protocol.
//! * [`harness`]: experiment drivers, statistics and CSV/JSON emission.
//!
//! The numeric core is generic over [`Real`] (`f32` / `f64`); the aliases
//! below fix the scalar for the common cases.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contact;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod landmarks;
pub mod pointcloud;
pub mod registration;
pub mod scalar;
pub mod scenegen;

pub use error::{Error, Result};
pub use scalar::Real;

pub type RigidTransform64 = geometry::RigidTransform<f64>;
pub type RigidTransform32 = geometry::RigidTransform<f32>;
pub type TwistVector64 = geometry::TwistVector<f64>;
pub type PointCloud64 = pointcloud::PointCloud<f64>;
pub type PointCloud32 = pointcloud::PointCloud<f32>;
pub type RgbdFrame64 = pointcloud::RgbdFrame<f64>;
pub type CameraIntrinsics64 = pointcloud::CameraIntrinsics<f64>;
