use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig, Batch};
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::rng::RngStream;
use crate::train::{AdamWParams, EpochRunner, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    /// Stop once training accuracy reaches this.
    pub target_accuracy: f64,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            target_accuracy: 0.95,
            lr: 1e-2,
            batch: 32,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub net: Backbone,
    pub source_accuracy: f64,
    pub epochs: usize,
}

/// Trains every backbone weight on the source task with constant-LR AdamW
/// until the accuracy target or the epoch cap.
pub fn pretrain(
    backbone: &BackboneConfig,
    config: &PretrainConfig,
    data: &Batch,
    rng: &RngStream,
) -> Result<Pretrained> {
    let mut net = Backbone::init(backbone, &mut rng.derive("init"))?;
    let none = AdapterSet::new();
    let train_accuracy = |net: &Backbone| -> Result<f64> {
        Ok(accuracy(&net.predict_proba(data, &none)?, &data.labels))
    };
    let mut acc = train_accuracy(&net)?;
    let mut epochs = 0;
    let mut theta = net.flat_params();
    let mut runner = EpochRunner::new(
        theta.len(),
        config.batch,
        AdamWParams {
            weight_decay: config.weight_decay,
            ..AdamWParams::default()
        },
    );
    let schedule = Schedule::constant(config.lr);
    let train_rng = rng.derive("train");
    while epochs < config.max_epochs && acc < config.target_accuracy {
        let mut scratch = net.clone();
        runner.run(
            &mut theta,
            data,
            &schedule,
            1,
            &train_rng,
            |t, mb| {
                scratch.set_flat_params(t)?;
                scratch.full_loss_and_grads(mb)
            },
            |_, _| Ok(()),
        )?;
        net.set_flat_params(&theta)?;
        epochs += 1;
        acc = train_accuracy(&net)?;
        if !acc.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "pretraining produced non-finite weights at epoch {epochs}"
            )));
        }
    }
    Ok(Pretrained {
        net,
        source_accuracy: acc,
        epochs,
    })
}
