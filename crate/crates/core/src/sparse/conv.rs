//! Submanifold sparse 3x3x3 convolution: output active sites equal input
//! active sites; missing neighbors contribute zero.

use super::{NeighborTable, KERNEL_OFFSETS};
use crate::nn::{DenseTensor, HasParams, Param};
use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct SubmanifoldConv {
    /// Kernel, shape `[27, c_in, c_out]`.
    pub weights: Param,
    pub bias: Param,
    pub c_in: usize,
    pub c_out: usize,
}

impl SubmanifoldConv {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        SubmanifoldConv {
            weights: Param::he_init(
                format!("{name}.w"),
                vec![KERNEL_OFFSETS.len(), c_in, c_out],
                KERNEL_OFFSETS.len() * c_in,
                rng,
            ),
            bias: Param::zeros(format!("{name}.b"), vec![c_out]),
            c_in,
            c_out,
        }
    }

    /// An identity kernel: center tap is the identity matrix, other taps and
    /// bias are zero. Requires `c_in == c_out`.
    pub fn identity(name: &str, channels: usize) -> Self {
        let mut w = DenseTensor::zeros(vec![KERNEL_OFFSETS.len(), channels, channels]);
        for ch in 0..channels {
            let idx = (super::CENTER_OFFSET * channels + ch) * channels + ch;
            w.data_mut()[idx] = 1.0;
        }
        SubmanifoldConv {
            weights: Param::new(format!("{name}.w"), w),
            bias: Param::zeros(format!("{name}.b"), vec![channels]),
            c_in: channels,
            c_out: channels,
        }
    }

    #[inline]
    fn tap<'a>(w: &'a [f64], o: usize, ci: usize, c_in: usize, c_out: usize) -> &'a [f64] {
        let base = (o * c_in + ci) * c_out;
        &w[base..base + c_out]
    }

    /// `out[v] = sum_o W[o]^T feat[nbr(v, o)] + bias`.
    pub fn forward(&self, x: &DenseTensor, nbrs: &NeighborTable) -> Result<DenseTensor> {
        let (m, c) = x.dims2()?;
        if c != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv {} expects {} input channels, got {c}",
                self.weights.name, self.c_in
            )));
        }
        if nbrs.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "neighbor table covers {} voxels, tensor has {m}",
                nbrs.len()
            )));
        }
        let w = self.weights.value.data();
        let b = self.bias.value.data();
        let mut out = DenseTensor::zeros(vec![m, self.c_out]);
        for v in 0..m {
            let out_row = out.row_mut(v);
            out_row.copy_from_slice(b);
            for (o, nbr) in nbrs.row(v).iter().enumerate() {
                let Some(n) = nbr else { continue };
                let feat = x.row(*n as usize);
                for (ci, &fv) in feat.iter().enumerate() {
                    if fv == 0.0 {
                        continue;
                    }
                    let tap = Self::tap(w, o, ci, self.c_in, self.c_out);
                    for (co, &wv) in tap.iter().enumerate() {
                        out_row[co] += fv * wv;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns the gradient w.r.t. the
    /// input features. `x` and `nbrs` must be the forward inputs.
    pub fn backward(
        &mut self,
        x: &DenseTensor,
        nbrs: &NeighborTable,
        dout: &DenseTensor,
    ) -> Result<DenseTensor> {
        let (m, _) = x.dims2()?;
        let w = self.weights.value.data();
        let mut dx = DenseTensor::zeros(vec![m, self.c_in]);
        for v in 0..m {
            let d_row = dout.row(v);
            for (co, &dv) in d_row.iter().enumerate() {
                self.bias.grad.data_mut()[co] += dv;
            }
            for (o, nbr) in nbrs.row(v).iter().enumerate() {
                let Some(n) = nbr else { continue };
                let n = *n as usize;
                let feat = x.row(n);
                for ci in 0..self.c_in {
                    let tap = Self::tap(w, o, ci, self.c_in, self.c_out);
                    let base = (o * self.c_in + ci) * self.c_out;
                    let dw = &mut self.weights.grad.data_mut()[base..base + self.c_out];
                    let fv = feat[ci];
                    let mut acc = 0.0;
                    for (co, &dv) in d_row.iter().enumerate() {
                        acc += dv * tap[co];
                        dw[co] += fv * dv;
                    }
                    dx.row_mut(n)[ci] += acc;
                }
            }
        }
        Ok(dx)
    }
}

impl HasParams for SubmanifoldConv {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weights, &mut self.bias]
    }
}
