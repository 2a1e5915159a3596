//! Conditional SDF decoder: query positions in, signed distances in (-1, 1)
//! out, modulated by a shape embedding through conditional batch
//! normalization in every block.

use crate::nn::{
    relu_backward, relu_forward, tanh_backward, tanh_forward, BnMode, Checkpoint,
    ConditionalBatchNorm, DenseTensor, HasParams, Linear, Param,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl DecoderConfig {
    /// Paper-scale preset: 128-wide blocks, 128-d embedding.
    pub fn paper() -> Self {
        DecoderConfig {
            embed_dim: 128,
            hidden: 128,
            blocks: 5,
        }
    }

    /// Desk-scale preset: 32-d embedding, narrower blocks, still 5 deep.
    pub fn desk() -> Self {
        DecoderConfig {
            embed_dim: 32,
            hidden: 64,
            blocks: 5,
        }
    }
}

/// One conditional block: fc -> CBN -> ReLU -> fc -> CBN -> ReLU.
#[derive(Debug, Clone)]
struct DecoderBlock {
    fc1: Linear,
    cbn1: ConditionalBatchNorm,
    fc2: Linear,
    cbn2: ConditionalBatchNorm,
}

#[derive(Debug, Clone)]
pub struct SdfDecoder {
    pub cfg: DecoderConfig,
    fc_in: Linear,
    blocks: Vec<DecoderBlock>,
    fc_out: Linear,
}

// The tape spells out every intermediate the backward pass consumes.
pub struct DecoderTape {
    broadcast: bool,
    fc_in: crate::nn::LinearCache,
    blocks: Vec<BlockTape>,
    fc_out: crate::nn::LinearCache,
    out_tanh: DenseTensor,
}

struct BlockTape {
    fc1: crate::nn::LinearCache,
    cbn1: crate::nn::CbnCache,
    n1: DenseTensor,
    fc2: crate::nn::LinearCache,
    cbn2: crate::nn::CbnCache,
    n2: DenseTensor,
}

impl SdfDecoder {
    pub fn new(cfg: DecoderConfig, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            blocks.push(DecoderBlock {
                fc1: Linear::new(&format!("decoder.block{b}.fc1"), cfg.hidden, cfg.hidden, rng),
                cbn1: ConditionalBatchNorm::new(
                    &format!("decoder.block{b}.cbn1"),
                    cfg.hidden,
                    cfg.embed_dim,
                    rng,
                ),
                fc2: Linear::new(&format!("decoder.block{b}.fc2"), cfg.hidden, cfg.hidden, rng),
                cbn2: ConditionalBatchNorm::new(
                    &format!("decoder.block{b}.cbn2"),
                    cfg.hidden,
                    cfg.embed_dim,
                    rng,
                ),
            });
        }
        SdfDecoder {
            fc_in: Linear::new("decoder.fc_in", 3, cfg.hidden, rng),
            blocks,
            fc_out: Linear::new("decoder.fc_out", cfg.hidden, 1, rng),
            cfg,
        }
    }

    /// Broadcasts a single embedding row to all query rows when needed.
    fn conditioning(&self, e: &DenseTensor, n: usize) -> Result<(DenseTensor, bool)> {
        let (rows, d) = e.dims2()?;
        if d != self.cfg.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding dim {d}, decoder expects {}",
                self.cfg.embed_dim
            )));
        }
        if rows == n {
            Ok((e.clone(), false))
        } else if rows == 1 {
            let mut out = DenseTensor::zeros(vec![n, d]);
            for r in 0..n {
                out.row_mut(r).copy_from_slice(e.row(0));
            }
            Ok((out, true))
        } else {
            Err(Error::ShapeMismatch(format!(
                "{rows} embedding rows for {n} queries"
            )))
        }
    }

    /// Evaluates queries (N x 3) conditioned on `e` (N x D, or 1 x D to
    /// broadcast). Output is N x 1 inside (-1, 1).
    pub fn forward(
        &mut self,
        queries: &DenseTensor,
        e: &DenseTensor,
        mode: BnMode,
    ) -> Result<(DenseTensor, DecoderTape)> {
        let (n, q_dim) = queries.dims2()?;
        if q_dim != 3 {
            return Err(Error::ShapeMismatch(format!("queries must be N x 3, got N x {q_dim}")));
        }
        let (cond, broadcast) = self.conditioning(e, n)?;

        let (mut h, fc_in_cache) = self.fc_in.forward(queries)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (h1, fc1) = block.fc1.forward(&h)?;
            let (n1, cbn1) = block.cbn1.forward(&h1, &cond, mode)?;
            let a1 = relu_forward(&n1);
            let (h2, fc2) = block.fc2.forward(&a1)?;
            let (n2, cbn2) = block.cbn2.forward(&h2, &cond, mode)?;
            h = relu_forward(&n2);
            blocks.push(BlockTape {
                fc1,
                cbn1,
                n1,
                fc2,
                cbn2,
                n2,
            });
        }
        let (raw, fc_out_cache) = self.fc_out.forward(&h)?;
        let out = tanh_forward(&raw);
        Ok((
            out.clone(),
            DecoderTape {
                broadcast,
                fc_in: fc_in_cache,
                blocks,
                fc_out: fc_out_cache,
                out_tanh: out,
            },
        ))
    }

    /// Backward pass. Accumulates parameter gradients and returns
    /// `(dqueries, dembedding)`; the embedding gradient is summed back to a
    /// single row when the forward pass broadcast it.
    pub fn backward(
        &mut self,
        tape: &DecoderTape,
        dout: &DenseTensor,
    ) -> Result<(DenseTensor, DenseTensor)> {
        let draw = tanh_backward(&tape.out_tanh, dout);
        let mut dh = self.fc_out.backward(&tape.fc_out, &draw)?;
        let (n, _) = dh.dims2()?;
        let mut de_total = DenseTensor::zeros(vec![n, self.cfg.embed_dim]);
        for (block, t) in self.blocks.iter_mut().zip(tape.blocks.iter()).rev() {
            let dn2 = relu_backward(&t.n2, &dh);
            let (dh2, de2) = block.cbn2.backward(&t.cbn2, &dn2)?;
            de_total.add_assign(&de2);
            let da1 = block.fc2.backward(&t.fc2, &dh2)?;
            let dn1 = relu_backward(&t.n1, &da1);
            let (dh1, de1) = block.cbn1.backward(&t.cbn1, &dn1)?;
            de_total.add_assign(&de1);
            dh = block.fc1.backward(&t.fc1, &dh1)?;
        }
        let dqueries = self.fc_in.backward(&tape.fc_in, &dh)?;
        let de = if tape.broadcast {
            let mut summed = DenseTensor::zeros(vec![1, self.cfg.embed_dim]);
            for r in 0..n {
                let src = de_total.row(r);
                for (d, &s) in summed.row_mut(0).iter_mut().zip(src) {
                    *d += s;
                }
            }
            summed
        } else {
            de_total
        };
        Ok((dqueries, de))
    }

    /// Inference over a large query batch without gradient bookkeeping,
    /// evaluated in eval mode chunk by chunk.
    pub fn evaluate(&mut self, queries: &DenseTensor, e: &DenseTensor) -> Result<DenseTensor> {
        let (out, _) = self.forward(queries, e, BnMode::Eval)?;
        Ok(out)
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("decoder.embed_dim", self.cfg.embed_dim);
        ckpt.set_meta("decoder.hidden", self.cfg.hidden);
        ckpt.set_meta("decoder.blocks", self.cfg.blocks);
        let mut me = self.clone();
        for p in me.params_mut() {
            ckpt.put(&p.name, &p.value);
        }
        for (b, block) in self.blocks.iter().enumerate() {
            ckpt.put(
                &format!("decoder.block{b}.cbn1.running_mean"),
                &block.cbn1.bn.running_mean,
            );
            ckpt.put(
                &format!("decoder.block{b}.cbn1.running_var"),
                &block.cbn1.bn.running_var,
            );
            ckpt.put(
                &format!("decoder.block{b}.cbn2.running_mean"),
                &block.cbn2.bn.running_mean,
            );
            ckpt.put(
                &format!("decoder.block{b}.cbn2.running_var"),
                &block.cbn2.bn.running_var,
            );
        }
    }

    pub fn load(ckpt: &Checkpoint) -> Result<SdfDecoder> {
        let cfg = DecoderConfig {
            embed_dim: ckpt.meta_usize("decoder.embed_dim")?,
            hidden: ckpt.meta_usize("decoder.hidden")?,
            blocks: ckpt.meta_usize("decoder.blocks")?,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut decoder = SdfDecoder::new(cfg, &mut rng);
        for p in decoder.params_mut() {
            p.value = ckpt.get(&p.name, p.value.shape())?;
        }
        for (b, block) in decoder.blocks.iter_mut().enumerate() {
            block.cbn1.bn.running_mean = ckpt.get(
                &format!("decoder.block{b}.cbn1.running_mean"),
                block.cbn1.bn.running_mean.shape(),
            )?;
            block.cbn1.bn.running_var = ckpt.get(
                &format!("decoder.block{b}.cbn1.running_var"),
                block.cbn1.bn.running_var.shape(),
            )?;
            block.cbn2.bn.running_mean = ckpt.get(
                &format!("decoder.block{b}.cbn2.running_mean"),
                block.cbn2.bn.running_mean.shape(),
            )?;
            block.cbn2.bn.running_var = ckpt.get(
                &format!("decoder.block{b}.cbn2.running_var"),
                block.cbn2.bn.running_var.shape(),
            )?;
        }
        Ok(decoder)
    }
}

impl HasParams for SdfDecoder {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.fc_in.params_mut();
        for b in &mut self.blocks {
            ps.extend(b.fc1.params_mut());
            ps.extend(b.cbn1.params_mut());
            ps.extend(b.fc2.params_mut());
            ps.extend(b.cbn2.params_mut());
        }
        ps.extend(self.fc_out.params_mut());
        ps
    }
}
