//! Deterministic core of a LiDAR-camera fusion two-stage 3D detector.
//!
//! The crate covers everything between sensor files and evaluation numbers
//! that does not require training: pseudo-point back-projection, sparse voxel
//! tensors and the residual/encoder-decoder sparse blocks run with supplied
//! weights, voxel-point proposal pooling with cross-iteration attention,
//! IoU-stratified proposal generation, balanced-confidence rotated NMS and
//! KITTI-protocol R40 average precision.
//!
//! Every numeric kernel is pure and deterministic; parallel code paths reduce
//! in coordinate order so results are bit-identical at any thread count.

pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod projection;
pub mod proposals;
pub mod refine;
pub mod sparse;
pub mod synthetic;
pub mod voxel;
pub mod weights;

pub use error::{Error, Result};
pub use geometry::Box3D;
pub use projection::PointRecord;
pub use voxel::SparseTensor;
