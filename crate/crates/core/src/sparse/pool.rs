//! Sparse pooling and unpooling. Pooled keys are `floor(key / 2)`; voxels
//! sharing a pooled key are reduced by max or mean. The assignment produced
//! by pooling drives both unpooling and the backward passes.

use super::{SparseTensor, SpatialHashMap, VoxelKey, DEFAULT_LOAD_FACTOR};
use crate::nn::DenseTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

/// Everything needed to unpool and to run the pooling backward pass.
#[derive(Debug, Clone)]
pub struct PoolAssignment {
    pub mode: PoolMode,
    /// Pooled row for each fine voxel.
    pub parent: Vec<u32>,
    /// Fine voxels per pooled row.
    pub counts: Vec<u32>,
    /// For max mode: winning fine row per (pooled row, channel).
    pub argmax: Vec<u32>,
    /// Fine active set, restored by unpooling.
    pub fine_coords: Vec<VoxelKey>,
    pub fine_stride: u32,
    pub channels: usize,
}

/// Pools a tensor one stride level up (factor 2 per axis).
///
/// Grouping goes through the same hashmap as convolution neighbor lookup,
/// keyed by pooled coordinates; first-occurrence order fixes the output
/// ordering so results are reproducible.
pub fn sparse_pool(t: &SparseTensor, mode: PoolMode) -> (SparseTensor, PoolAssignment) {
    let m = t.num_voxels();
    let c = t.channels();
    let mut map = SpatialHashMap::with_capacity_for(m, DEFAULT_LOAD_FACTOR);
    let mut coords: Vec<VoxelKey> = Vec::new();
    let mut parent = Vec::with_capacity(m);
    let mut counts: Vec<u32> = Vec::new();
    for key in &t.coords {
        let pooled = key.pooled();
        let row = match map.lookup(pooled) {
            Some(r) => r as usize,
            None => {
                let r = coords.len();
                map.insert(pooled, r as u32).expect("fresh pooled key");
                coords.push(pooled);
                counts.push(0);
                r
            }
        };
        counts[row] += 1;
        parent.push(row as u32);
    }

    let out_m = coords.len();
    let mut features = DenseTensor::zeros(vec![out_m, c]);
    let mut argmax = Vec::new();
    match mode {
        PoolMode::Average => {
            for (i, &row) in parent.iter().enumerate() {
                let src = t.features.row(i);
                let dst = features.row_mut(row as usize);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for (row, &count) in counts.iter().enumerate() {
                for v in features.row_mut(row) {
                    *v /= count as f64;
                }
            }
        }
        PoolMode::Max => {
            argmax = vec![u32::MAX; out_m * c];
            features.fill(f64::NEG_INFINITY);
            for (i, &row) in parent.iter().enumerate() {
                let src = t.features.row(i);
                let row = row as usize;
                let dst = features.row_mut(row);
                for (ch, (&s, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                    if s > *d || argmax[row * c + ch] == u32::MAX {
                        *d = s;
                        argmax[row * c + ch] = i as u32;
                    }
                }
            }
        }
    }

    let pooled = SparseTensor {
        coords,
        features,
        stride: t.stride * 2,
        origin: t.origin,
        voxel_size: t.voxel_size,
    };
    let assignment = PoolAssignment {
        mode,
        parent,
        counts,
        argmax,
        fine_coords: t.coords.clone(),
        fine_stride: t.stride,
        channels: c,
    };
    (pooled, assignment)
}

/// Backward of [`sparse_pool`]: routes pooled-row gradients to fine rows
/// (uniformly for average mode, to the argmax row for max mode).
pub fn pool_backward(assignment: &PoolAssignment, dout: &DenseTensor) -> DenseTensor {
    let c = assignment.channels;
    let m = assignment.parent.len();
    let mut dx = DenseTensor::zeros(vec![m, c]);
    match assignment.mode {
        PoolMode::Average => {
            for (i, &row) in assignment.parent.iter().enumerate() {
                let row = row as usize;
                let count = assignment.counts[row] as f64;
                let src = dout.row(row);
                let dst = dx.row_mut(i);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s / count;
                }
            }
        }
        PoolMode::Max => {
            for row in 0..assignment.counts.len() {
                let src = dout.row(row);
                for (ch, &s) in src.iter().enumerate() {
                    let winner = assignment.argmax[row * c + ch];
                    dx.row_mut(winner as usize)[ch] += s;
                }
            }
        }
    }
    dx
}

/// Broadcasts each pooled voxel's feature back onto its fine voxels; the
/// output active set is exactly the pre-pool active set.
pub fn sparse_unpool(t: &SparseTensor, assignment: &PoolAssignment) -> Result<SparseTensor> {
    if t.num_voxels() != assignment.counts.len() {
        return Err(Error::ShapeMismatch(format!(
            "unpool: tensor has {} voxels, assignment expects {}",
            t.num_voxels(),
            assignment.counts.len()
        )));
    }
    if t.stride != assignment.fine_stride * 2 {
        return Err(Error::Contract(format!(
            "unpool: tensor stride {} does not match assignment (fine stride {})",
            t.stride, assignment.fine_stride
        )));
    }
    let c = t.channels();
    let m = assignment.fine_coords.len();
    let mut features = DenseTensor::zeros(vec![m, c]);
    for (i, &row) in assignment.parent.iter().enumerate() {
        features
            .row_mut(i)
            .copy_from_slice(t.features.row(row as usize));
    }
    Ok(SparseTensor {
        coords: assignment.fine_coords.clone(),
        features,
        stride: assignment.fine_stride,
        origin: t.origin,
        voxel_size: t.voxel_size,
    })
}

/// Backward of [`sparse_unpool`]: sums fine-row gradients into their pooled
/// parent.
pub fn unpool_backward(assignment: &PoolAssignment, dfine: &DenseTensor) -> DenseTensor {
    let c = dfine.shape().last().copied().unwrap_or(0);
    let mut dpooled = DenseTensor::zeros(vec![assignment.counts.len(), c]);
    for (i, &row) in assignment.parent.iter().enumerate() {
        let src = dfine.row(i);
        let dst = dpooled.row_mut(row as usize);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    dpooled
}
