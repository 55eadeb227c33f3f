//! Each module pulls in one chapter of `book/src` so `cargo test` runs its
//! code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}
#[doc = include_str!("../../../book/src/pseudo-points.md")]
pub mod pseudo_points {}
#[doc = include_str!("../../../book/src/sparse-blocks.md")]
pub mod sparse_blocks {}
#[doc = include_str!("../../../book/src/proposals.md")]
pub mod proposals {}
#[doc = include_str!("../../../book/src/postprocess.md")]
pub mod postprocess {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
