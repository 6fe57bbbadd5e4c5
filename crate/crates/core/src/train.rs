//! AdamW with warmup schedules, plus the mini-batch epoch loop shared by
//! burn-in, SWAG collection and pretraining.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::nn::{Backbone, Batch};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Linear warmup to `lr_max`, then linear decay to 0 at `total_steps`.
    BurnIn,
    /// Linear warmup to `lr_max`, then constant (SWALR-style).
    SwagCollect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub phase: Phase,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_max: f64,
}

impl Schedule {
    pub fn new(phase: Phase, warmup_steps: usize, total_steps: usize, lr_max: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::invalid(format!(
                "warmup steps {warmup_steps} exceed total steps {total_steps}"
            )));
        }
        Ok(Self {
            phase,
            warmup_steps,
            total_steps,
            lr_max,
        })
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            phase: Phase::SwagCollect,
            warmup_steps: 0,
            total_steps: 0,
            lr_max: lr,
        }
    }
}

pub fn lr_at(schedule: &Schedule, step: usize) -> f64 {
    let Schedule {
        phase,
        warmup_steps,
        total_steps,
        lr_max,
    } = *schedule;
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    match phase {
        Phase::SwagCollect => lr_max,
        Phase::BurnIn => {
            if step >= total_steps {
                0.0
            } else {
                lr_max * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub params: AdamWParams,
}

impl OptimizerState {
    pub fn new(len: usize, params: AdamWParams) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            params,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step(
    opt: &mut OptimizerState,
    theta: &mut [f64],
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    if theta.len() != opt.m.len() || grad.len() != theta.len() {
        return Err(Error::invalid(format!(
            "optimizer length {} vs theta {} vs grad {}",
            opt.m.len(),
            theta.len(),
            grad.len()
        )));
    }
    if let Some((i, g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient {g} at coordinate {i} (step {})",
            opt.step
        )));
    }
    let AdamWParams {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = opt.params;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        opt.m[i] = beta1 * opt.m[i] + (1.0 - beta1) * g;
        opt.v[i] = beta2 * opt.v[i] + (1.0 - beta2) * g * g;
        let mhat = opt.m[i] / bc1;
        let vhat = opt.v[i] / bc2;
        theta[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * theta[i]);
    }
    Ok(())
}

/// Fine-tuning hyperparameters. Defaults are tuned for the desk-scale
/// backbones, not taken from any large-model recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub burn_in_epochs: usize,
    pub lr_max: f64,
    pub batch: usize,
    pub warmup_fraction: f64,
    pub adamw: AdamWParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            burn_in_epochs: 10,
            lr_max: 1e-2,
            batch: 32,
            warmup_fraction: 0.06,
            adamw: AdamWParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch.max(1))
    }

    pub fn schedule(&self, phase: Phase, epochs: usize, n: usize) -> Schedule {
        let total = epochs * self.steps_per_epoch(n);
        let warmup = ((total as f64) * self.warmup_fraction).round() as usize;
        Schedule {
            phase,
            warmup_steps: warmup.min(total),
            total_steps: total,
            lr_max: self.lr_max,
        }
    }
}

/// Runs epochs of shuffled mini-batch AdamW over a flat parameter vector.
///
/// The gradient closure maps `(θ, batch)` to `(loss, ∇θ)`. The step counter
/// of the schedule is local to each `run` call; optimizer moments persist.
pub struct EpochRunner {
    pub opt: OptimizerState,
    pub batch: usize,
    /// Epochs completed across all `run` calls; keys the shuffle stream.
    pub epochs_done: usize,
}

impl EpochRunner {
    pub fn new(len: usize, batch: usize, params: AdamWParams) -> Self {
        Self {
            opt: OptimizerState::new(len, params),
            batch: batch.max(1),
            epochs_done: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn run<G, E>(
        &mut self,
        theta: &mut [f64],
        data: &Batch,
        schedule: &Schedule,
        epochs: usize,
        rng: &RngStream,
        mut grad: G,
        mut on_epoch_end: E,
    ) -> Result<()>
    where
        G: FnMut(&[f64], &Batch) -> Result<(f64, Vec<f64>)>,
        E: FnMut(usize, &[f64]) -> Result<()>,
    {
        let shuffle = rng.derive("shuffle");
        let mut step = 0;
        for _ in 0..epochs {
            let order = shuffle
                .derive_index(self.epochs_done as u64)
                .permutation(data.len());
            for chunk in order.chunks(self.batch) {
                let mb = data.select(chunk);
                let (loss, g) = grad(theta, &mb)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("loss {loss} at step {step}")));
                }
                adamw_step(&mut self.opt, theta, &g, lr_at(schedule, step))?;
                step += 1;
            }
            self.epochs_done += 1;
            on_epoch_end(self.epochs_done, theta)?;
        }
        Ok(())
    }
}

/// Gradient closure for adapter fine-tuning.
pub fn adapter_objective<'a>(
    net: &'a Backbone,
    adapters: &'a mut AdapterSet,
) -> impl FnMut(&[f64], &Batch) -> Result<(f64, Vec<f64>)> + 'a {
    move |theta, mb| {
        adapters.unpack(theta)?;
        let (loss, g) = net.loss_and_grads(mb, adapters, None)?;
        Ok((loss, g.values))
    }
}

/// Mean training loss of the adapted network over `data`.
pub fn mean_loss(net: &Backbone, adapters: &AdapterSet, data: &Batch) -> Result<f64> {
    let logits = net.forward(data, adapters)?;
    Ok(crate::nn::loss(&logits, &data.labels))
}

/// Burn-in: `config.burn_in_epochs` of AdamW with linear warmup and decay.
/// Leaves the final θ unpacked into `adapters` and returns the runner so a
/// later phase can continue with the same optimizer moments.
pub fn burn_in(
    net: &Backbone,
    adapters: &mut AdapterSet,
    data: &Batch,
    config: &TrainConfig,
    rng: &RngStream,
) -> Result<EpochRunner> {
    let mut theta = adapters.pack().values;
    let mut runner = EpochRunner::new(theta.len(), config.batch, config.adamw);
    let schedule = config.schedule(Phase::BurnIn, config.burn_in_epochs, data.len());
    {
        let objective = adapter_objective(net, adapters);
        runner.run(
            &mut theta,
            data,
            &schedule,
            config.burn_in_epochs,
            rng,
            objective,
            |_, _| Ok(()),
        )?;
    }
    adapters.unpack(&theta)?;
    Ok(runner)
}
