use super::Param;

/// SGD with momentum, weight decay, and a stepwise learning-rate schedule:
/// the rate drops every `schedule_step` iterations through `schedule_factors`.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub schedule_step: usize,
    pub schedule_factors: Vec<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.3,
            schedule_step: 10_000,
            schedule_factors: vec![1.0, 0.3, 0.1, 0.01, 0.001, 0.0001],
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn with_base_lr(lr: f64) -> Self {
        OptimizerConfig {
            base_lr: lr,
            ..Default::default()
        }
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let idx = (iteration / self.schedule_step).min(self.schedule_factors.len() - 1);
        self.base_lr * self.schedule_factors[idx]
    }
}

/// One optimizer step over `params`; consumes (zeroes) the gradients.
///
/// Update per parameter: `g = grad + wd * value`,
/// `m = momentum * m + g`, `value -= lr(iteration) * m`.
pub fn sgd_step(params: &mut [&mut Param], config: &OptimizerConfig, iteration: usize) {
    let lr = config.learning_rate(iteration);
    for p in params.iter_mut() {
        let n = p.value.len();
        for i in 0..n {
            let g = p.grad.data()[i] + config.weight_decay * p.value.data()[i];
            let m = config.momentum * p.momentum.data()[i] + g;
            p.momentum.data_mut()[i] = m;
            p.value.data_mut()[i] -= lr * m;
        }
        p.zero_grad();
    }
}
