//! Files on disk: dataset manifests, PNG images, checkpoints and PLY export.

pub mod checkpoint;
pub mod dataset;
pub mod image;
pub mod ply;
