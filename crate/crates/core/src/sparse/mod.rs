//! Spatial-hash-backed sparse voxel tensors: voxelization, submanifold
//! convolution, pooling/unpooling, and neighbor precomputation.
//!
//! Active voxels are identified by integer grid keys held in an
//! open-addressed [`SpatialHashMap`]; convolutions look neighbors up through
//! a precomputed 27-entry [`NeighborTable`] that is reused across every
//! convolution at the same stride.

mod conv;
mod hash;
mod io;
mod pool;

pub use conv::SubmanifoldConv;
pub use hash::{build_hashmap, hash_key, HashStats, SpatialHashMap, DEFAULT_LOAD_FACTOR};
pub use io::{read_cloud_binary, read_cloud_ply, write_cloud_binary};
pub use pool::{pool_backward, sparse_pool, sparse_unpool, unpool_backward, PoolAssignment, PoolMode};

use crate::geometry::{PointCloud, Vec3};
use crate::nn::DenseTensor;
use crate::{Error, Result};

/// Integer voxel grid coordinates at some stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoxelKey {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelKey {
    pub fn new(ix: i32, iy: i32, iz: i32) -> Self {
        VoxelKey { ix, iy, iz }
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        VoxelKey::new(self.ix + dx, self.iy + dy, self.iz + dz)
    }

    /// Key of the containing voxel one stride level up (floor division).
    pub fn pooled(self) -> Self {
        VoxelKey::new(
            self.ix.div_euclid(2),
            self.iy.div_euclid(2),
            self.iz.div_euclid(2),
        )
    }
}

/// The 27 kernel offsets in a fixed order; (0,0,0) sits at [`CENTER_OFFSET`].
pub const KERNEL_OFFSETS: [(i32, i32, i32); 27] = {
    let mut out = [(0, 0, 0); 27];
    let mut i = 0;
    let mut dx = -1;
    while dx <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dz = -1;
            while dz <= 1 {
                out[i] = (dx, dy, dz);
                i += 1;
                dz += 1;
            }
            dy += 1;
        }
        dx += 1;
    }
    out
};

pub const CENTER_OFFSET: usize = 13;

/// Sparse voxel tensor: M distinct keys with an M x C feature block.
///
/// World position of a voxel center is
/// `origin + (key + 0.5) * voxel_size * stride`.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    pub coords: Vec<VoxelKey>,
    pub features: DenseTensor,
    pub stride: u32,
    pub origin: Vec3,
    pub voxel_size: f64,
}

impl SparseTensor {
    pub fn num_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        if self.coords.is_empty() {
            self.features.shape().last().copied().unwrap_or(0)
        } else {
            self.features.len() / self.coords.len()
        }
    }

    pub fn voxel_center(&self, i: usize) -> Vec3 {
        let k = self.coords[i];
        let cell = self.voxel_size * self.stride as f64;
        self.origin
            + Vec3::new(
                (k.ix as f64 + 0.5) * cell,
                (k.iy as f64 + 0.5) * cell,
                (k.iz as f64 + 0.5) * cell,
            )
    }

    /// Same active set and geometry, new features.
    pub fn with_features(&self, features: DenseTensor) -> SparseTensor {
        debug_assert_eq!(features.shape()[0], self.coords.len());
        SparseTensor {
            coords: self.coords.clone(),
            features,
            stride: self.stride,
            origin: self.origin,
            voxel_size: self.voxel_size,
        }
    }
}

/// Per-voxel optional feature-row indices for each of the 27 kernel offsets.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    entries: Vec<[Option<u32>; 27]>,
}

impl NeighborTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn neighbor(&self, voxel: usize, offset: usize) -> Option<u32> {
        self.entries[voxel][offset]
    }

    pub fn row(&self, voxel: usize) -> &[Option<u32>; 27] {
        &self.entries[voxel]
    }
}

/// Exact 27-neighborhood table over the tensor's active set, reusable across
/// subsequent convolutions at the same stride.
pub fn precompute_neighbors(t: &SparseTensor) -> NeighborTable {
    let map = build_hashmap(&t.coords, DEFAULT_LOAD_FACTOR)
        .expect("tensor coords are unique by construction");
    let mut entries = vec![[None; 27]; t.coords.len()];
    for (v, key) in t.coords.iter().enumerate() {
        for (o, &(dx, dy, dz)) in KERNEL_OFFSETS.iter().enumerate() {
            entries[v][o] = map.lookup(key.offset(dx, dy, dz));
        }
        debug_assert_eq!(entries[v][CENTER_OFFSET], Some(v as u32));
    }
    NeighborTable { entries }
}

/// Voxelizes a point cloud: pooled-key grouping with mean reduction, exactly
/// the pooling path applied to duplicate input keys.
///
/// The grid origin is the componentwise floor of the cloud's min corner;
/// the per-point voxel row mapping comes back alongside the tensor.
pub fn voxelize(pc: &PointCloud, voxel_size: f64) -> Result<(SparseTensor, Vec<u32>)> {
    if voxel_size <= 0.0 {
        return Err(Error::Contract(format!(
            "voxel_size {voxel_size} must be > 0"
        )));
    }
    let c = pc.feature_dim;
    if pc.is_empty() {
        return Ok((
            SparseTensor {
                coords: Vec::new(),
                features: DenseTensor::zeros(vec![0, c]),
                stride: 1,
                origin: Vec3::ZERO,
                voxel_size,
            },
            Vec::new(),
        ));
    }
    let mut min = pc.positions[0];
    for &p in &pc.positions {
        min = min.min(p);
    }
    let origin = Vec3::new(min.x.floor(), min.y.floor(), min.z.floor());

    let keys: Vec<VoxelKey> = pc
        .positions
        .iter()
        .map(|&p| {
            let q = (p - origin) * (1.0 / voxel_size);
            VoxelKey::new(q.x.floor() as i32, q.y.floor() as i32, q.z.floor() as i32)
        })
        .collect();

    // First-occurrence order keeps the result reproducible.
    let mut map = SpatialHashMap::with_capacity_for(pc.len(), DEFAULT_LOAD_FACTOR);
    let mut coords: Vec<VoxelKey> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut point_to_voxel = Vec::with_capacity(pc.len());
    for (i, &key) in keys.iter().enumerate() {
        let row = match map.lookup(key) {
            Some(r) => r as usize,
            None => {
                let r = coords.len();
                map.insert(key, r as u32)
                    .expect("fresh key cannot be a duplicate");
                coords.push(key);
                counts.push(0);
                sums.extend(std::iter::repeat(0.0).take(c));
                r
            }
        };
        counts[row] += 1;
        if c > 0 {
            let f = pc.feature_row(i);
            for (s, &v) in sums[row * c..(row + 1) * c].iter_mut().zip(f) {
                *s += v;
            }
        }
        point_to_voxel.push(row as u32);
    }
    for (row, &count) in counts.iter().enumerate() {
        for v in &mut sums[row * c..(row + 1) * c] {
            *v /= count as f64;
        }
    }
    let m = coords.len();
    Ok((
        SparseTensor {
            coords,
            features: DenseTensor::from_vec(vec![m, c], sums),
            stride: 1,
            origin,
            voxel_size,
        },
        point_to_voxel,
    ))
}

/// Propagates per-voxel features back to points via the voxelize mapping
/// (nearest-voxel assignment).
pub fn voxel_to_point(t: &SparseTensor, point_to_voxel: &[u32]) -> Result<DenseTensor> {
    let c = t.channels();
    let m = t.num_voxels();
    let mut out = DenseTensor::zeros(vec![point_to_voxel.len(), c]);
    for (p, &v) in point_to_voxel.iter().enumerate() {
        if v as usize >= m {
            return Err(Error::Contract(format!(
                "point {p} maps to voxel {v}, but the tensor has {m} voxels"
            )));
        }
        out.row_mut(p).copy_from_slice(t.features.row(v as usize));
    }
    Ok(out)
}

/// Adjoint of [`voxel_to_point`]: accumulates per-point gradients onto the
/// voxels they read from.
pub fn voxel_to_point_backward(
    dpoints: &DenseTensor,
    point_to_voxel: &[u32],
    num_voxels: usize,
) -> DenseTensor {
    let c = dpoints.shape().last().copied().unwrap_or(0);
    let mut out = DenseTensor::zeros(vec![num_voxels, c]);
    for (p, &v) in point_to_voxel.iter().enumerate() {
        let src = dpoints.row(p);
        for (d, &s) in out.row_mut(v as usize).iter_mut().zip(src) {
            *d += s;
        }
    }
    out
}
