//! Open-addressed spatial hashmap keyed on integer voxel coordinates.

use super::VoxelKey;
use crate::{Error, Result};

/// Multiplicative constants adopted from the classic spatial-hash
/// construction this scheme follows; they are conventional large primes,
/// not values specific to any dataset.
const P1: u64 = 73_856_093;
const P2: u64 = 19_349_663;
const P3: u64 = 83_492_791;

/// Load factor the table is sized for by default.
pub const DEFAULT_LOAD_FACTOR: f64 = 0.42;

/// Home slot of a key: `((ix*P1) xor (iy*P2) xor (iz*P3)) mod capacity`,
/// with linear probing resolving collisions.
#[inline]
pub fn hash_key(k: VoxelKey, capacity: usize) -> usize {
    debug_assert!(capacity > 0);
    let hx = (k.ix as i64 as u64).wrapping_mul(P1);
    let hy = (k.iy as i64 as u64).wrapping_mul(P2);
    let hz = (k.iz as i64 as u64).wrapping_mul(P3);
    ((hx ^ hy ^ hz) % capacity as u64) as usize
}

/// Probe and collision counters accumulated while building a table.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashStats {
    pub insertions: u64,
    /// Insertions whose home slot was already occupied.
    pub collisions: u64,
    /// Total probe steps past the home slot, over all insertions.
    pub probe_steps: u64,
}

impl HashStats {
    pub fn collision_rate(&self) -> f64 {
        if self.insertions == 0 {
            0.0
        } else {
            self.collisions as f64 / self.insertions as f64
        }
    }
}

/// Open-addressed table from voxel keys to `u32` values (feature-row
/// indices), with linear probing.
#[derive(Debug, Clone)]
pub struct SpatialHashMap {
    slots: Vec<Option<(VoxelKey, u32)>>,
    occupied: usize,
    pub stats: HashStats,
}

impl SpatialHashMap {
    /// Table sized for `n` keys at the target load factor. Capacity is at
    /// least `n + 1` so an unsuccessful probe always terminates.
    pub fn with_capacity_for(n: usize, target_load_factor: f64) -> Self {
        assert!(
            target_load_factor > 0.0 && target_load_factor < 1.0,
            "load factor must be in (0, 1)"
        );
        let capacity = ((n as f64 / target_load_factor).ceil() as usize).max(n + 1).max(1);
        SpatialHashMap {
            slots: vec![None; capacity],
            occupied: 0,
            stats: HashStats::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.occupied
    }

    pub fn is_empty(&self) -> bool {
        self.occupied == 0
    }

    pub fn load_factor(&self) -> f64 {
        self.occupied as f64 / self.slots.len() as f64
    }

    pub fn insert(&mut self, key: VoxelKey, value: u32) -> Result<()> {
        if self.occupied + 1 >= self.slots.len() {
            return Err(Error::Contract(
                "spatial hashmap is full; size it for the key count".into(),
            ));
        }
        let cap = self.slots.len();
        let home = hash_key(key, cap);
        self.stats.insertions += 1;
        let mut slot = home;
        loop {
            match &self.slots[slot] {
                None => {
                    self.slots[slot] = Some((key, value));
                    self.occupied += 1;
                    return Ok(());
                }
                Some((k, _)) if *k == key => {
                    return Err(Error::Contract(format!(
                        "duplicate key ({}, {}, {}) in spatial hashmap",
                        key.ix, key.iy, key.iz
                    )));
                }
                Some(_) => {
                    if slot == home {
                        self.stats.collisions += 1;
                    }
                    self.stats.probe_steps += 1;
                    slot = (slot + 1) % cap;
                }
            }
        }
    }

    pub fn lookup(&self, key: VoxelKey) -> Option<u32> {
        let cap = self.slots.len();
        let mut slot = hash_key(key, cap);
        loop {
            match &self.slots[slot] {
                None => return None,
                Some((k, v)) if *k == key => return Some(*v),
                Some(_) => slot = (slot + 1) % cap,
            }
        }
    }
}

/// Builds a table holding `coords[i] -> i`, sized by the target load factor.
/// Duplicate keys are an error: voxelization owns deduplication.
pub fn build_hashmap(coords: &[VoxelKey], target_load_factor: f64) -> Result<SpatialHashMap> {
    let mut map = SpatialHashMap::with_capacity_for(coords.len(), target_load_factor);
    for (i, &key) in coords.iter().enumerate() {
        map.insert(key, i as u32)?;
    }
    Ok(map)
}
