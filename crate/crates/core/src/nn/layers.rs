use super::{DenseTensor, HasParams, Param};
use crate::{Error, Result};
use rand::Rng;

/// Fully connected layer: `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Cache for [`Linear::backward`]: the forward input.
pub struct LinearCache {
    x: DenseTensor,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::he_init(format!("{name}.w"), vec![in_dim, out_dim], in_dim, rng),
            b: Param::zeros(format!("{name}.b"), vec![out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<(DenseTensor, LinearCache)> {
        let (n, i) = x.dims2()?;
        if i != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear {} expects {} inputs, got {i}",
                self.w.name, self.in_dim
            )));
        }
        let mut y = x.matmul(&self.w.value)?;
        for r in 0..n {
            let row = y.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v += self.b.value.data()[c];
            }
        }
        Ok((y, LinearCache { x: x.clone() }))
    }

    /// Accumulates dW and db; returns dx.
    pub fn backward(&mut self, cache: &LinearCache, dy: &DenseTensor) -> Result<DenseTensor> {
        let (n, o) = dy.dims2()?;
        debug_assert_eq!(o, self.out_dim);
        let mut dx = DenseTensor::zeros(vec![n, self.in_dim]);
        for r in 0..n {
            let dy_row = dy.row(r);
            let x_row = cache.x.row(r);
            let dx_row = dx.row_mut(r);
            for (i, &xv) in x_row.iter().enumerate() {
                let w_row = self.w.value.row(i);
                let dw_row = self.w.grad.row_mut(i);
                let mut acc = 0.0;
                for (c, &dyv) in dy_row.iter().enumerate() {
                    acc += dyv * w_row[c];
                    dw_row[c] += xv * dyv;
                }
                dx_row[i] = acc;
            }
            for (c, &dyv) in dy_row.iter().enumerate() {
                self.b.grad.data_mut()[c] += dyv;
            }
        }
        Ok(dx)
    }

    /// Forward without caching, for inference paths.
    pub fn infer(&self, x: &DenseTensor) -> Result<DenseTensor> {
        Ok(self.forward(x)?.0)
    }
}

impl HasParams for Linear {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Elementwise ReLU; the subgradient at 0 is 0.
pub fn relu_forward(x: &DenseTensor) -> DenseTensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    DenseTensor::from_vec(x.shape().to_vec(), data)
}

pub fn relu_backward(x: &DenseTensor, dy: &DenseTensor) -> DenseTensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
        .collect();
    DenseTensor::from_vec(x.shape().to_vec(), data)
}

/// Elementwise tanh; output strictly inside (-1, 1).
pub fn tanh_forward(x: &DenseTensor) -> DenseTensor {
    let data = x.data().iter().map(|&v| v.tanh()).collect();
    DenseTensor::from_vec(x.shape().to_vec(), data)
}

/// Backward given the forward *output* y: dtanh = 1 - y^2.
pub fn tanh_backward(y: &DenseTensor, dy: &DenseTensor) -> DenseTensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&yv, &dv)| dv * (1.0 - yv * yv))
        .collect();
    DenseTensor::from_vec(y.shape().to_vec(), data)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_RUNNING_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running stats are updated.
    Train,
    /// Running statistics (frozen).
    Eval,
    /// Batch statistics without touching the running stats. Used where the
    /// batch is a whole object (instance-style normalization), so inference
    /// stays deterministic per input while being robust to distribution
    /// shift in batch composition.
    BatchStats,
}

/// Per-channel batch normalization over rows of an `N x C` tensor.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: DenseTensor,
    pub running_var: DenseTensor,
    pub channels: usize,
    name: String,
}

/// Batch statistics saved by the forward pass for the coupled backward.
pub struct BnCache {
    xhat: DenseTensor,
    inv_std: Vec<f64>,
    mode: BnMode,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), vec![channels]);
        gamma.value.fill(1.0);
        let mut running_var = DenseTensor::zeros(vec![channels]);
        running_var.fill(1.0);
        BatchNorm {
            gamma,
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: DenseTensor::zeros(vec![channels]),
            running_var,
            channels,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Normalizes and returns `(xhat, cache)`; the caller applies its own
    /// scale/shift when conditioning, so plain BN wraps this.
    fn normalize(&mut self, x: &DenseTensor, mode: BnMode) -> Result<(DenseTensor, BnCache)> {
        let (n, c) = x.dims2()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm {} expects {} channels, got {c}",
                self.name, self.channels
            )));
        }
        let mut xhat = DenseTensor::zeros(vec![n, c]);
        let mut inv_std = vec![0.0; c];
        match mode {
            BnMode::Train | BnMode::BatchStats => {
                if n < 2 {
                    return Err(Error::Contract(format!(
                        "batchnorm {} needs a batch of >= 2 in training mode, got {n}",
                        self.name
                    )));
                }
                for ch in 0..c {
                    let mut mean = 0.0;
                    for r in 0..n {
                        mean += x.at2(r, ch);
                    }
                    mean /= n as f64;
                    let mut var = 0.0;
                    for r in 0..n {
                        let d = x.at2(r, ch) - mean;
                        var += d * d;
                    }
                    var /= n as f64;
                    let istd = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[ch] = istd;
                    for r in 0..n {
                        xhat.set2(r, ch, (x.at2(r, ch) - mean) * istd);
                    }
                    if mode == BnMode::Train {
                        let m = BN_RUNNING_MOMENTUM;
                        self.running_mean.data_mut()[ch] =
                            m * self.running_mean.data()[ch] + (1.0 - m) * mean;
                        self.running_var.data_mut()[ch] =
                            m * self.running_var.data()[ch] + (1.0 - m) * var;
                    }
                }
            }
            BnMode::Eval => {
                for ch in 0..c {
                    let mean = self.running_mean.data()[ch];
                    let istd = 1.0 / (self.running_var.data()[ch] + BN_EPS).sqrt();
                    inv_std[ch] = istd;
                    for r in 0..n {
                        xhat.set2(r, ch, (x.at2(r, ch) - mean) * istd);
                    }
                }
            }
        }
        Ok((
            xhat.clone(),
            BnCache {
                xhat,
                inv_std,
                mode,
            },
        ))
    }

    /// Gradient through the normalization alone, given `d(loss)/d(xhat)`.
    fn normalize_backward(&self, cache: &BnCache, dxhat: &DenseTensor) -> DenseTensor {
        let (n, c) = dxhat.dims2().expect("rank 2");
        let mut dx = DenseTensor::zeros(vec![n, c]);
        match cache.mode {
            BnMode::Train | BnMode::BatchStats => {
                for ch in 0..c {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for r in 0..n {
                        sum_d += dxhat.at2(r, ch);
                        sum_dx += dxhat.at2(r, ch) * cache.xhat.at2(r, ch);
                    }
                    let scale = cache.inv_std[ch] / n as f64;
                    for r in 0..n {
                        let v = n as f64 * dxhat.at2(r, ch)
                            - sum_d
                            - cache.xhat.at2(r, ch) * sum_dx;
                        dx.set2(r, ch, scale * v);
                    }
                }
            }
            BnMode::Eval => {
                for ch in 0..c {
                    for r in 0..n {
                        dx.set2(r, ch, dxhat.at2(r, ch) * cache.inv_std[ch]);
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &DenseTensor, mode: BnMode) -> Result<(DenseTensor, BnCache)> {
        let (xhat, cache) = self.normalize(x, mode)?;
        let (n, c) = xhat.dims2()?;
        let mut y = DenseTensor::zeros(vec![n, c]);
        for r in 0..n {
            for ch in 0..c {
                y.set2(
                    r,
                    ch,
                    self.gamma.value.data()[ch] * xhat.at2(r, ch) + self.beta.value.data()[ch],
                );
            }
        }
        Ok((y, cache))
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &DenseTensor) -> Result<DenseTensor> {
        let (n, c) = dy.dims2()?;
        let mut dxhat = DenseTensor::zeros(vec![n, c]);
        for r in 0..n {
            for ch in 0..c {
                let d = dy.at2(r, ch);
                self.gamma.grad.data_mut()[ch] += d * cache.xhat.at2(r, ch);
                self.beta.grad.data_mut()[ch] += d;
                dxhat.set2(r, ch, d * self.gamma.value.data()[ch]);
            }
        }
        Ok(self.normalize_backward(cache, &dxhat))
    }
}

impl HasParams for BatchNorm {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Batch normalization whose scale and shift come from a conditioning
/// embedding through two linear heads: `y = gamma(e) * xhat + beta(e)`,
/// row by row.
#[derive(Debug, Clone)]
pub struct ConditionalBatchNorm {
    pub bn: BatchNorm,
    pub gamma_head: Linear,
    pub beta_head: Linear,
}

pub struct CbnCache {
    bn: BnCache,
    gamma_cache: LinearCache,
    beta_cache: LinearCache,
    gamma: DenseTensor,
}

impl ConditionalBatchNorm {
    pub fn new(name: &str, channels: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mut gamma_head = Linear::new(&format!("{name}.gamma_head"), embed_dim, channels, rng);
        // Bias 1 so a zero embedding starts as a neutral condition, and
        // small head weights so conditioning ramps up from plain BN.
        gamma_head.b.value.fill(1.0);
        gamma_head.w.value.scale(0.1);
        let mut beta_head = Linear::new(&format!("{name}.beta_head"), embed_dim, channels, rng);
        beta_head.w.value.scale(0.1);
        ConditionalBatchNorm {
            bn: BatchNorm::new(&format!("{name}.bn"), channels),
            gamma_head,
            beta_head,
        }
    }

    /// `x` is `N x C`, `e` is `N x D` (one conditioning row per input row).
    pub fn forward(
        &mut self,
        x: &DenseTensor,
        e: &DenseTensor,
        mode: BnMode,
    ) -> Result<(DenseTensor, CbnCache)> {
        let (n, c) = x.dims2()?;
        let (ne, _) = e.dims2()?;
        if n != ne {
            return Err(Error::ShapeMismatch(format!(
                "conditional batchnorm: {n} inputs vs {ne} embeddings"
            )));
        }
        let (gamma, gamma_cache) = self.gamma_head.forward(e)?;
        let (beta, beta_cache) = self.beta_head.forward(e)?;
        let (xhat, bn_cache) = self.bn.normalize(x, mode)?;
        let mut y = DenseTensor::zeros(vec![n, c]);
        for r in 0..n {
            for ch in 0..c {
                y.set2(r, ch, gamma.at2(r, ch) * xhat.at2(r, ch) + beta.at2(r, ch));
            }
        }
        Ok((
            y,
            CbnCache {
                bn: bn_cache,
                gamma_cache,
                beta_cache,
                gamma,
            },
        ))
    }

    /// Returns `(dx, de)`.
    pub fn backward(
        &mut self,
        cache: &CbnCache,
        dy: &DenseTensor,
    ) -> Result<(DenseTensor, DenseTensor)> {
        let (n, c) = dy.dims2()?;
        let mut dxhat = DenseTensor::zeros(vec![n, c]);
        let mut dgamma = DenseTensor::zeros(vec![n, c]);
        let mut dbeta = DenseTensor::zeros(vec![n, c]);
        for r in 0..n {
            for ch in 0..c {
                let d = dy.at2(r, ch);
                dxhat.set2(r, ch, d * cache.gamma.at2(r, ch));
                dgamma.set2(r, ch, d * cache.bn.xhat.at2(r, ch));
                dbeta.set2(r, ch, d);
            }
        }
        let dx = self.bn.normalize_backward(&cache.bn, &dxhat);
        let mut de = self.gamma_head.backward(&cache.gamma_cache, &dgamma)?;
        de.add_assign(&self.beta_head.backward(&cache.beta_cache, &dbeta)?);
        Ok((dx, de))
    }
}

impl HasParams for ConditionalBatchNorm {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.gamma_head.params_mut();
        ps.extend(self.beta_head.params_mut());
        ps
    }
}

/// Row-wise softmax probabilities of an `N x K` logit tensor.
pub fn softmax_probs(logits: &DenseTensor) -> DenseTensor {
    let (n, k) = logits.dims2().expect("rank 2 logits");
    let mut out = DenseTensor::zeros(vec![n, k]);
    for r in 0..n {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        let out_row = out.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            out_row[c] = (v - m).exp() / z;
        }
    }
    out
}

/// Mean softmax cross-entropy; gradient is `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(
    logits: &DenseTensor,
    labels: &[usize],
) -> Result<(f64, DenseTensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if n == 0 {
        return Ok((0.0, DenseTensor::zeros(vec![0, k])));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax_probs(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &label) in labels.iter().enumerate() {
        loss -= probs.at2(r, label).max(1e-300).ln();
        let v = grad.at2(r, label) - 1.0;
        grad.set2(r, label, v);
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}
