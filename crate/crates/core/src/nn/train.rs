use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{Gradients, Network, Trace};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Network, cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: Gradients::zeros_like(net), v: Gradients::zeros_like(net) }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn apply(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let lr_t = c.lr * bc2.sqrt() / bc1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            adam_update(&c, lr_t, &mut layer.weights, &grads.weights[i], &mut self.m.weights[i], &mut self.v.weights[i]);
            adam_update(&c, lr_t, &mut layer.bias, &grads.bias[i], &mut self.m.bias[i], &mut self.v.bias[i]);
        }
    }
}

fn adam_update(c: &AdamConfig, lr_t: f32, params: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]) {
    for (((w, &gi), mi), vi) in params.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
        *w -= lr_t * *mi / (vi.sqrt() + c.eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Learning rate factor reached in the last epoch, following a cosine
    /// curve from 1. `1.0` keeps the rate constant.
    pub lr_final_factor: f32,
}

impl TrainConfig {
    /// Learning rate used during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        if self.epochs <= 1 || self.lr_final_factor == 1.0 {
            return self.adam.lr;
        }
        let t = epoch as f32 / (self.epochs - 1) as f32;
        let f = self.lr_final_factor + (1.0 - self.lr_final_factor) * 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
        self.adam.lr * f
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 64, seed: 0, adam: AdamConfig::default(), lr_final_factor: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean batch loss observed during each epoch.
    pub epoch_losses: Vec<f32>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f32> {
        self.epoch_losses.last().copied()
    }
}

/// Mini-batch Adam training. Sample order is reshuffled every epoch from
/// `cfg.seed`, so runs are reproducible.
pub fn train(
    net: &mut Network,
    inputs: &[&[f32]],
    targets: &[&[f32]],
    cfg: &TrainConfig,
) -> Result<TrainReport, NnError> {
    train_with(net, inputs, targets, cfg, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with(
    net: &mut Network,
    inputs: &[&[f32]],
    targets: &[&[f32]],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f32),
) -> Result<TrainReport, NnError> {
    if inputs.is_empty() {
        return Err(NnError::Config("training set is empty".into()));
    }
    if inputs.len() != targets.len() {
        return Err(NnError::Shape(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
    }
    if !(cfg.lr_final_factor > 0.0 && cfg.lr_final_factor <= 1.0) {
        return Err(NnError::Config(format!("lr_final_factor {} outside (0, 1]", cfg.lr_final_factor)));
    }
    if cfg.batch_size == 0 {
        return Err(NnError::Config("batch size must be positive".into()));
    }
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut adam = Adam::new(net, cfg.adam);
    let mut grads = Gradients::zeros_like(net);
    let mut trace = Trace::default();
    let mut bx: Vec<&[f32]> = Vec::with_capacity(cfg.batch_size);
    let mut bt: Vec<&[f32]> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        adam.set_lr(cfg.lr_at(epoch));
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            bt.clear();
            bx.extend(chunk.iter().map(|&i| inputs[i]));
            bt.extend(chunk.iter().map(|&i| targets[i]));
            let loss = net.batch_gradients(&bx, &bt, &mut trace, &mut grads)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(NnError::Diverged { epoch });
            }
            adam.apply(net, &grads);
            total += loss as f64;
            batches += 1;
            report.steps += 1;
        }
        let mean = (total / batches as f64) as f32;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(report)
}
