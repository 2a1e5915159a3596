//! Shape encoder: canonical object points are voxelized onto a unit-cube
//! grid and pushed through three blocks of submanifold convolutions
//! (BatchNorm + ReLU between), each followed by a stride-2 max pool, then a
//! per-voxel fully connected layer and global average pooling produce the
//! embedding. The fc/pool order follows the prior network description
//! literally; `fc_before_pool = false` swaps to the conventional
//! pool-then-fc order.

use crate::geometry::{PointCloud, Vec3};
use crate::nn::{
    relu_backward, relu_forward, BatchNorm, BnCache, BnMode, Checkpoint, DenseTensor, HasParams,
    Linear, LinearCache, Param,
};
use crate::sparse::{
    pool_backward, precompute_neighbors, sparse_pool, voxelize, NeighborTable, PoolAssignment,
    PoolMode, SparseTensor, SubmanifoldConv,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Channel pairs for the two convolutions of each block.
    pub channel_plan: Vec<(usize, usize)>,
    pub embed_dim: usize,
    /// Voxel grid resolution over the canonical unit cube.
    pub grid_resolution: usize,
    pub fc_before_pool: bool,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            channel_plan: vec![(32, 64), (64, 128), (128, 128)],
            embed_dim: 128,
            grid_resolution: 32,
            fc_before_pool: true,
        }
    }

    pub fn desk() -> Self {
        EncoderConfig {
            channel_plan: vec![(8, 16), (16, 24), (24, 24)],
            embed_dim: 32,
            grid_resolution: 32,
            fc_before_pool: true,
        }
    }

    fn last_channels(&self) -> usize {
        self.channel_plan.last().expect("non-empty plan").1
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    conv1: SubmanifoldConv,
    bn1: BatchNorm,
    conv2: SubmanifoldConv,
    bn2: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct ShapeEncoder {
    pub cfg: EncoderConfig,
    blocks: Vec<EncoderBlock>,
    fc: Linear,
}

struct BlockTape {
    input: DenseTensor,
    nbrs: NeighborTable,
    bn1: BnCache,
    n1: DenseTensor,
    a1: DenseTensor,
    bn2: BnCache,
    n2: DenseTensor,
    assignment: PoolAssignment,
}

pub struct EncoderTape {
    blocks: Vec<BlockTape>,
    fc: Option<LinearCache>,
    /// Voxel count feeding the global average pool.
    pooled_m: usize,
}

impl ShapeEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(cfg.channel_plan.len());
        let mut c_in = 1;
        for (b, &(c1, c2)) in cfg.channel_plan.iter().enumerate() {
            blocks.push(EncoderBlock {
                conv1: SubmanifoldConv::new(&format!("encoder.block{b}.conv1"), c_in, c1, rng),
                bn1: BatchNorm::new(&format!("encoder.block{b}.bn1"), c1),
                conv2: SubmanifoldConv::new(&format!("encoder.block{b}.conv2"), c1, c2, rng),
                bn2: BatchNorm::new(&format!("encoder.block{b}.bn2"), c2),
            });
            c_in = c2;
        }
        let fc = Linear::new("encoder.fc", cfg.last_channels(), cfg.embed_dim, rng);
        ShapeEncoder { cfg, blocks, fc }
    }

    /// Voxelizes canonical points (unit-cube coordinates) with a constant
    /// occupancy feature, sorting voxels by key so the result is independent
    /// of point order.
    fn voxelize_canonical(&self, points: &[Vec3]) -> Result<SparseTensor> {
        if points.is_empty() {
            return Err(Error::Contract("encoder needs at least one point".into()));
        }
        let n = points.len();
        let pc = PointCloud::new(points.to_vec(), vec![1.0; n], 1)?;
        let (t, _) = voxelize(&pc, 1.0 / self.cfg.grid_resolution as f64)?;
        let mut order: Vec<usize> = (0..t.num_voxels()).collect();
        order.sort_by_key(|&i| (t.coords[i].ix, t.coords[i].iy, t.coords[i].iz));
        let coords = order.iter().map(|&i| t.coords[i]).collect();
        let mut features = DenseTensor::zeros(vec![t.num_voxels(), 1]);
        for (row, &i) in order.iter().enumerate() {
            features.row_mut(row).copy_from_slice(t.features.row(i));
        }
        Ok(SparseTensor {
            coords,
            features,
            stride: t.stride,
            origin: t.origin,
            voxel_size: t.voxel_size,
        })
    }

    /// Embedding (1 x D) for one object's canonical points.
    pub fn forward(&mut self, points: &[Vec3], mode: BnMode) -> Result<(DenseTensor, EncoderTape)> {
        let mut tensor = self.voxelize_canonical(points)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let nbrs = precompute_neighbors(&tensor);
            let input = tensor.features.clone();
            let h1 = block.conv1.forward(&input, &nbrs)?;
            let (n1, bn1) = block.bn1.forward(&h1, mode)?;
            let a1 = relu_forward(&n1);
            let h2 = block.conv2.forward(&a1, &nbrs)?;
            let (n2, bn2) = block.bn2.forward(&h2, mode)?;
            let a2 = relu_forward(&n2);
            let (pooled, assignment) = sparse_pool(&tensor.with_features(a2), PoolMode::Max);
            blocks.push(BlockTape {
                input,
                nbrs,
                bn1,
                n1,
                a1,
                bn2,
                n2,
                assignment,
            });
            tensor = pooled;
        }

        let m = tensor.num_voxels();
        let (embedding, fc_cache) = if self.cfg.fc_before_pool {
            let (per_voxel, cache) = self.fc.forward(&tensor.features)?;
            (global_average(&per_voxel), Some(cache))
        } else {
            let pooled = global_average(&tensor.features);
            let (e, cache) = self.fc.forward(&pooled)?;
            (e, Some(cache))
        };
        Ok((
            embedding,
            EncoderTape {
                blocks,
                fc: fc_cache,
                pooled_m: m,
            },
        ))
    }

    /// Backward from an embedding gradient (1 x D). Parameter gradients
    /// accumulate in place; the input-point gradient has no consumer (points
    /// are data), so it is not formed.
    pub fn backward(&mut self, tape: &EncoderTape, de: &DenseTensor) -> Result<()> {
        let m = tape.pooled_m;
        let fc_cache = tape.fc.as_ref().expect("tape from forward");
        let mut dfeat = if self.cfg.fc_before_pool {
            // d(global mean of fc rows): spread to rows then through fc.
            let mut dper = DenseTensor::zeros(vec![m, self.cfg.embed_dim]);
            for r in 0..m {
                for (c, v) in dper.row_mut(r).iter_mut().enumerate() {
                    *v = de.at2(0, c) / m as f64;
                }
            }
            self.fc.backward(fc_cache, &dper)?
        } else {
            let dpooled = self.fc.backward(fc_cache, de)?;
            let mut dfeat = DenseTensor::zeros(vec![m, self.cfg.last_channels()]);
            for r in 0..m {
                for (c, v) in dfeat.row_mut(r).iter_mut().enumerate() {
                    *v = dpooled.at2(0, c) / m as f64;
                }
            }
            dfeat
        };

        for (block, t) in self.blocks.iter_mut().zip(tape.blocks.iter()).rev() {
            let da2 = pool_backward(&t.assignment, &dfeat);
            let dn2 = relu_backward(&t.n2, &da2);
            let dh2 = block.bn2.backward(&t.bn2, &dn2)?;
            let da1 = block.conv2.backward(&t.a1, &t.nbrs, &dh2)?;
            let dn1 = relu_backward(&t.n1, &da1);
            let dh1 = block.bn1.backward(&t.bn1, &dn1)?;
            dfeat = block.conv1.backward(&t.input, &t.nbrs, &dh1)?;
        }
        Ok(())
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("encoder.embed_dim", self.cfg.embed_dim);
        ckpt.set_meta("encoder.grid_resolution", self.cfg.grid_resolution);
        ckpt.set_meta("encoder.fc_before_pool", self.cfg.fc_before_pool);
        ckpt.set_meta(
            "encoder.channel_plan",
            self.cfg
                .channel_plan
                .iter()
                .map(|(a, b)| format!("{a}:{b}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        let mut me = self.clone();
        for p in me.params_mut() {
            ckpt.put(&p.name, &p.value);
        }
        for block in &self.blocks {
            for bn in [&block.bn1, &block.bn2] {
                ckpt.put(&format!("{}.running_mean", bn.name()), &bn.running_mean);
                ckpt.put(&format!("{}.running_var", bn.name()), &bn.running_var);
            }
        }
    }

    pub fn load(ckpt: &Checkpoint) -> Result<ShapeEncoder> {
        let plan_text = ckpt.meta("encoder.channel_plan").ok_or_else(|| {
            Error::Format {
                path: "<checkpoint>".into(),
                detail: "missing encoder.channel_plan".into(),
            }
        })?;
        let channel_plan = plan_text
            .split(',')
            .map(|pair| {
                let (a, b) = pair.split_once(':').ok_or_else(|| Error::Format {
                    path: "<checkpoint>".into(),
                    detail: format!("bad channel pair '{pair}'"),
                })?;
                Ok((
                    a.parse().map_err(|_| Error::Format {
                        path: "<checkpoint>".into(),
                        detail: format!("bad channel '{a}'"),
                    })?,
                    b.parse().map_err(|_| Error::Format {
                        path: "<checkpoint>".into(),
                        detail: format!("bad channel '{b}'"),
                    })?,
                ))
            })
            .collect::<Result<Vec<(usize, usize)>>>()?;
        let cfg = EncoderConfig {
            channel_plan,
            embed_dim: ckpt.meta_usize("encoder.embed_dim")?,
            grid_resolution: ckpt.meta_usize("encoder.grid_resolution")?,
            fc_before_pool: ckpt.meta("encoder.fc_before_pool") == Some("true"),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut encoder = ShapeEncoder::new(cfg, &mut rng);
        for p in encoder.params_mut() {
            p.value = ckpt.get(&p.name, p.value.shape())?;
        }
        for block in &mut encoder.blocks {
            for bn in [&mut block.bn1, &mut block.bn2] {
                bn.running_mean =
                    ckpt.get(&format!("{}.running_mean", bn.name()), bn.running_mean.shape())?;
                bn.running_var =
                    ckpt.get(&format!("{}.running_var", bn.name()), bn.running_var.shape())?;
            }
        }
        Ok(encoder)
    }
}

impl HasParams for ShapeEncoder {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = Vec::new();
        for b in &mut self.blocks {
            ps.extend(b.conv1.params_mut());
            ps.extend(b.bn1.params_mut());
            ps.extend(b.conv2.params_mut());
            ps.extend(b.bn2.params_mut());
        }
        ps.extend(self.fc.params_mut());
        ps
    }
}

fn global_average(x: &DenseTensor) -> DenseTensor {
    let (m, c) = x.dims2().expect("rank 2");
    let mut out = DenseTensor::zeros(vec![1, c]);
    for r in 0..m {
        for (acc, &v) in out.row_mut(0).iter_mut().zip(x.row(r)) {
            *acc += v;
        }
    }
    out.scale(1.0 / m.max(1) as f64);
    out
}
