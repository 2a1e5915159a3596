//! Sparse U-Net backbone: encoder blocks of two submanifold convolutions
//! with stride-2 max pooling between, a two-convolution bottleneck, and a
//! mirrored decoder with unpooling and skip connections by coordinate
//! identity (unpooling restores exactly the pre-pool active set, so skip
//! features concatenate row by row).

use crate::nn::{
    relu_backward, relu_forward, BatchNorm, BnCache, BnMode, Checkpoint, DenseTensor, HasParams,
    Param,
};
use crate::sparse::{
    pool_backward, precompute_neighbors, sparse_pool, sparse_unpool, unpool_backward,
    NeighborTable, PoolAssignment, PoolMode, SparseTensor, SubmanifoldConv,
};
use crate::Result;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    /// Channel width of each encoder block (two convolutions per block).
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub input_channels: usize,
    pub use_batchnorm: bool,
}

impl BackboneConfig {
    /// Paper-scale channel plan.
    pub fn paper() -> Self {
        BackboneConfig {
            encoder_channels: vec![64, 96, 128, 160, 192, 224, 256],
            bottleneck_channels: 256,
            input_channels: 1,
            use_batchnorm: false,
        }
    }

    /// Desk-scale preset.
    pub fn desk() -> Self {
        BackboneConfig {
            encoder_channels: vec![8, 12, 16],
            bottleneck_channels: 24,
            input_channels: 1,
            use_batchnorm: false,
        }
    }

    /// Output feature width (the first block's channels, at stride 1).
    pub fn feature_dim(&self) -> usize {
        self.encoder_channels[0]
    }
}

/// Two convolutions with optional BatchNorm and ReLU after each.
#[derive(Debug, Clone)]
struct ConvPair {
    conv1: SubmanifoldConv,
    bn1: Option<BatchNorm>,
    conv2: SubmanifoldConv,
    bn2: Option<BatchNorm>,
}

struct ConvPairTape {
    input: DenseTensor,
    bn1: Option<BnCache>,
    pre1: DenseTensor,
    mid: DenseTensor,
    bn2: Option<BnCache>,
    pre2: DenseTensor,
}

impl ConvPair {
    fn new(name: &str, c_in: usize, c_out: usize, bn: bool, rng: &mut impl Rng) -> Self {
        ConvPair {
            conv1: SubmanifoldConv::new(&format!("{name}.conv1"), c_in, c_out, rng),
            bn1: bn.then(|| BatchNorm::new(&format!("{name}.bn1"), c_out)),
            conv2: SubmanifoldConv::new(&format!("{name}.conv2"), c_out, c_out, rng),
            bn2: bn.then(|| BatchNorm::new(&format!("{name}.bn2"), c_out)),
        }
    }

    fn forward(
        &mut self,
        x: &DenseTensor,
        nbrs: &NeighborTable,
        mode: BnMode,
    ) -> Result<(DenseTensor, ConvPairTape)> {
        let h1 = self.conv1.forward(x, nbrs)?;
        let (pre1, bn1_cache) = match &mut self.bn1 {
            Some(bn) => {
                let (y, cache) = bn.forward(&h1, mode)?;
                (y, Some(cache))
            }
            None => (h1, None),
        };
        let a1 = relu_forward(&pre1);
        let h2 = self.conv2.forward(&a1, nbrs)?;
        let (pre2, bn2_cache) = match &mut self.bn2 {
            Some(bn) => {
                let (y, cache) = bn.forward(&h2, mode)?;
                (y, Some(cache))
            }
            None => (h2, None),
        };
        let out = relu_forward(&pre2);
        Ok((
            out,
            ConvPairTape {
                input: x.clone(),
                bn1: bn1_cache,
                pre1,
                mid: a1,
                bn2: bn2_cache,
                pre2,
            },
        ))
    }

    fn backward(
        &mut self,
        tape: &ConvPairTape,
        nbrs: &NeighborTable,
        dout: &DenseTensor,
    ) -> Result<DenseTensor> {
        let dpre2 = relu_backward(&tape.pre2, dout);
        let dh2 = match (&mut self.bn2, &tape.bn2) {
            (Some(bn), Some(cache)) => bn.backward(cache, &dpre2)?,
            _ => dpre2,
        };
        let da1 = self.conv2.backward(&tape.mid, nbrs, &dh2)?;
        let dpre1 = relu_backward(&tape.pre1, &da1);
        let dh1 = match (&mut self.bn1, &tape.bn1) {
            (Some(bn), Some(cache)) => bn.backward(cache, &dpre1)?,
            _ => dpre1,
        };
        self.conv1.backward(&tape.input, nbrs, &dh1)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.conv1.params_mut();
        if let Some(bn) = &mut self.bn1 {
            ps.extend(bn.params_mut());
        }
        ps.extend(self.conv2.params_mut());
        if let Some(bn) = &mut self.bn2 {
            ps.extend(bn.params_mut());
        }
        ps
    }

    fn batchnorms(&self) -> Vec<&BatchNorm> {
        self.bn1.iter().chain(self.bn2.iter()).collect()
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.bn1.iter_mut().chain(self.bn2.iter_mut()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    encoder: Vec<ConvPair>,
    bottleneck: ConvPair,
    decoder: Vec<ConvPair>,
}

pub struct BackboneTape {
    encoder: Vec<(NeighborTable, ConvPairTape, PoolAssignment)>,
    bottleneck: (NeighborTable, ConvPairTape),
    decoder: Vec<(NeighborTable, ConvPairTape, PoolAssignment)>,
    /// Channel split (upsampled, skip) per decoder level.
    splits: Vec<(usize, usize)>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, rng: &mut impl Rng) -> Self {
        let bn = cfg.use_batchnorm;
        let mut encoder = Vec::new();
        let mut c_in = cfg.input_channels;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            encoder.push(ConvPair::new(&format!("backbone.enc{i}"), c_in, c, bn, rng));
            c_in = c;
        }
        let bottleneck = ConvPair::new(
            "backbone.bottleneck",
            c_in,
            cfg.bottleneck_channels,
            bn,
            rng,
        );
        let mut decoder = Vec::new();
        let mut c_up = cfg.bottleneck_channels;
        for (i, &c_skip) in cfg.encoder_channels.iter().enumerate().rev() {
            decoder.push(ConvPair::new(
                &format!("backbone.dec{i}"),
                c_up + c_skip,
                c_skip,
                bn,
                rng,
            ));
            c_up = c_skip;
        }
        Backbone {
            cfg,
            encoder,
            bottleneck,
            decoder,
        }
    }

    /// Per-voxel features at the input stride. The output active set equals
    /// the input active set exactly (submanifold closure through the
    /// pool/unpool round trip).
    pub fn forward(
        &mut self,
        input: &SparseTensor,
        mode: BnMode,
    ) -> Result<(SparseTensor, BackboneTape)> {
        let mut tensor = input.clone();
        let mut enc_tapes = Vec::with_capacity(self.encoder.len());
        let mut skips = Vec::with_capacity(self.encoder.len());
        for pair in &mut self.encoder {
            let nbrs = precompute_neighbors(&tensor);
            let (features, tape) = pair.forward(&tensor.features, &nbrs, mode)?;
            skips.push(features.clone());
            let (pooled, assignment) = sparse_pool(&tensor.with_features(features), PoolMode::Max);
            enc_tapes.push((nbrs, tape, assignment));
            tensor = pooled;
        }

        let nbrs = precompute_neighbors(&tensor);
        let (features, tape) = self.bottleneck.forward(&tensor.features, &nbrs, mode)?;
        let bottleneck_tape = (nbrs, tape);
        tensor = tensor.with_features(features);

        let mut dec_tapes = Vec::with_capacity(self.decoder.len());
        let mut splits = Vec::with_capacity(self.decoder.len());
        for (level, pair) in self.decoder.iter_mut().enumerate() {
            let enc_level = self.encoder.len() - 1 - level;
            let assignment = &enc_tapes[enc_level].2;
            let fine = sparse_unpool(&tensor, assignment)?;
            let skip = &skips[enc_level];
            let c_up = fine.channels();
            let c_skip = skip.shape()[1];
            let concat = concat_columns(&fine.features, skip)?;
            let nbrs = precompute_neighbors(&fine);
            let (features, tape) = pair.forward(&concat, &nbrs, mode)?;
            dec_tapes.push((nbrs, tape, assignment.clone()));
            splits.push((c_up, c_skip));
            tensor = fine.with_features(features);
        }

        Ok((
            tensor,
            BackboneTape {
                encoder: enc_tapes,
                bottleneck: bottleneck_tape,
                decoder: dec_tapes,
                splits,
            },
        ))
    }

    /// Accumulates parameter gradients from a per-voxel feature gradient at
    /// the output stride.
    pub fn backward(&mut self, tape: &BackboneTape, dout: &DenseTensor) -> Result<()> {
        // Decoder, deepest-last in the tape, walked in reverse.
        let mut dcurrent = dout.clone();
        let mut dskips: Vec<Option<DenseTensor>> = vec![None; self.encoder.len()];
        for (level, pair) in self.decoder.iter_mut().enumerate().rev() {
            let (nbrs, pair_tape, assignment) = &tape.decoder[level];
            let dconcat = pair.backward(pair_tape, nbrs, &dcurrent)?;
            let (c_up, c_skip) = tape.splits[level];
            let (dfine, dskip) = split_columns(&dconcat, c_up, c_skip)?;
            let enc_level = self.encoder.len() - 1 - level;
            dskips[enc_level] = Some(dskip);
            // Through the unpool back to the pooled (coarser) level.
            dcurrent = unpool_backward(assignment, &dfine);
        }

        let (nbrs, pair_tape) = &tape.bottleneck;
        dcurrent = self.bottleneck.backward(pair_tape, nbrs, &dcurrent)?;

        for (level, pair) in self.encoder.iter_mut().enumerate().rev() {
            let (nbrs, pair_tape, assignment) = &tape.encoder[level];
            // Gradient arriving from the pooled path plus the skip branch.
            let mut dfeatures = pool_backward(assignment, &dcurrent);
            if let Some(dskip) = &dskips[level] {
                dfeatures.add_assign(dskip);
            }
            dcurrent = pair.backward(pair_tape, nbrs, &dfeatures)?;
        }
        Ok(())
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        let mut me = self.clone();
        for p in me.params_mut() {
            ckpt.put(&p.name, &p.value);
        }
        for pair in self
            .encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoder.iter())
        {
            for bn in pair.batchnorms() {
                ckpt.put(&format!("{}.running_mean", bn.name()), &bn.running_mean);
                ckpt.put(&format!("{}.running_var", bn.name()), &bn.running_var);
            }
        }
    }

    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in self.params_mut() {
            p.value = ckpt.get(&p.name, p.value.shape())?;
        }
        let bottleneck = &mut self.bottleneck;
        for pair in self
            .encoder
            .iter_mut()
            .chain(std::iter::once(bottleneck))
            .chain(self.decoder.iter_mut())
        {
            for bn in pair.batchnorms_mut() {
                bn.running_mean =
                    ckpt.get(&format!("{}.running_mean", bn.name()), bn.running_mean.shape())?;
                bn.running_var =
                    ckpt.get(&format!("{}.running_var", bn.name()), bn.running_var.shape())?;
            }
        }
        Ok(())
    }
}

impl HasParams for Backbone {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = Vec::new();
        for pair in &mut self.encoder {
            ps.extend(pair.params_mut());
        }
        ps.extend(self.bottleneck.params_mut());
        for pair in &mut self.decoder {
            ps.extend(pair.params_mut());
        }
        ps
    }
}

fn concat_columns(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (n, ca) = a.dims2()?;
    let (nb, cb) = b.dims2()?;
    assert_eq!(n, nb, "concat row mismatch");
    let mut out = DenseTensor::zeros(vec![n, ca + cb]);
    for r in 0..n {
        let row = out.row_mut(r);
        row[..ca].copy_from_slice(a.row(r));
        row[ca..].copy_from_slice(b.row(r));
    }
    Ok(out)
}

fn split_columns(x: &DenseTensor, ca: usize, cb: usize) -> Result<(DenseTensor, DenseTensor)> {
    let (n, c) = x.dims2()?;
    assert_eq!(c, ca + cb, "split width mismatch");
    let mut a = DenseTensor::zeros(vec![n, ca]);
    let mut b = DenseTensor::zeros(vec![n, cb]);
    for r in 0..n {
        let row = x.row(r);
        a.row_mut(r).copy_from_slice(&row[..ca]);
        b.row_mut(r).copy_from_slice(&row[ca..]);
    }
    Ok((a, b))
}
