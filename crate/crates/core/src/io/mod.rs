//! Readers and writers for scene inputs and pipeline artifacts.
//!
//! KITTI text and binary conventions are reproduced as-is; the depth map,
//! RGB raster, point dump and voxel dump use small fixed headers documented
//! byte-for-byte in `docs/formats.md`. Every reader is a pure function over an
//! immutable buffer and either returns a complete value or a typed error.

mod calib;
mod dump;
mod label;
mod raster;
mod velodyne;

pub use calib::{read_calib, write_calib, CalibBundle};
pub use dump::{read_points, read_sparse_tensor, write_points, write_sparse_tensor};
pub use label::{read_labels, write_labels, LabelRecord, ObjectClass};
pub use raster::{
    read_depth_map, read_rgb, write_depth_map, write_rgb, DepthEncoding, DepthMap, RgbImage,
};
pub use velodyne::{read_velodyne, write_velodyne, LidarPoint, RawScan};

pub(crate) fn take_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}
