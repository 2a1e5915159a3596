//! Sparse-voxel 3D object detection and shape reconstruction for point clouds.
//!
//! The pipeline: a point cloud is voxelized into a [`sparse::SparseTensor`],
//! a submanifold-convolution U-Net extracts per-voxel features, per-point
//! heads predict oriented boxes and shape embeddings, a vote graph
//! consolidates the predictions, and a diversity-aware sampler plus NMS emit
//! final detections. A separately trained SDF decoder turns per-object
//! embeddings into meshes via marching cubes.
//!
//! Modules map onto the stages:
//! - [`geometry`]: oriented boxes, corners, IoU, canonical frames
//! - [`sparse`]: spatial-hash voxel tensors, submanifold conv, pooling
//! - [`nn`]: dense layers with hand-derived backward passes, SGD, gradcheck
//! - [`detect`]: the detector (backbone, heads, graph, sampler, losses, mAP)
//! - [`shape`]: SDF prior (encoder/decoder, ray augmentation, marching cubes)
//! - [`synth`]: synthetic shapes and LIDAR-style scenes with analytic SDFs

pub mod checks;
pub mod config;
pub mod detect;
pub mod geometry;
pub mod nn;
pub mod shape;
pub mod sparse;
pub mod synth;

mod error;

pub use error::{Error, Result};
