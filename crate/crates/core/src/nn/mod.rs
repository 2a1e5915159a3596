//! Minimal dense-tensor layers with hand-derived backward passes, the SGD
//! optimizer, and finite-difference verification.
//!
//! There is no autodiff tape: the layer set is small and fixed, and every
//! backward pass is checked against central differences (see [`gradcheck`]).
//! All arithmetic is double precision; checkpoints store 32-bit floats.

mod checkpoint;
mod gradcheck;
mod layers;
mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradcheck, GradCheckReport, GRADCHECK_H, GRADCHECK_TOL};
pub use layers::{
    relu_backward, relu_forward, softmax_cross_entropy, softmax_probs, tanh_backward,
    tanh_forward, BatchNorm, BnCache, BnMode, CbnCache, ConditionalBatchNorm, Linear,
    LinearCache,
};
pub use optim::{sgd_step, OptimizerConfig};
pub use tensor::DenseTensor;

use rand::Rng;

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: DenseTensor,
    pub grad: DenseTensor,
    pub momentum: DenseTensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: DenseTensor) -> Self {
        let grad = DenseTensor::zeros(value.shape().to_vec());
        let momentum = DenseTensor::zeros(value.shape().to_vec());
        Param {
            name: name.into(),
            value,
            grad,
            momentum,
        }
    }

    /// He-style init: normal with std sqrt(2 / fan_in).
    pub fn he_init(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal_sample(rng) * std).collect();
        Param::new(name, DenseTensor::from_vec(shape, data))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Param::new(name, DenseTensor::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Standard normal via Box-Muller; keeps the crate free of a distributions
/// dependency.
pub fn normal_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Anything exposing a flat list of trainable parameters.
pub trait HasParams {
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.numel()).sum()
    }
}
