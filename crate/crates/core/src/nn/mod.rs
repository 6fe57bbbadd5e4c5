//! Tiny backbones (MLP and single-head transformer) with exact gradients.

mod dense;
mod mlp;
mod pretrain;
mod transformer;

use serde::{Deserialize, Serialize};

pub use dense::DenseLayer;
pub use mlp::{Activation, Mlp, MlpConfig};
pub use pretrain::{pretrain, PretrainConfig, Pretrained};
pub use transformer::{LayerNorm, Transformer, TransformerBlock, TransformerConfig};

use crate::adapters::{AdapterMode, AdapterSet, JointParamVector, ParamId, SiteId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngStream;

/// Inputs and labels. For sequence models `inputs` stacks `seq_len` token
/// rows per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub seq_len: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, seq_len: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if seq_len == 0 || inputs.rows() != labels.len() * seq_len {
            return Err(Error::Shape {
                op: "batch",
                left: (labels.len() * seq_len.max(1), inputs.cols()),
                right: inputs.shape(),
            });
        }
        Ok(Self {
            inputs,
            seq_len,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    /// Examples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let rows: Vec<usize> = idx
            .iter()
            .flat_map(|&i| i * self.seq_len..(i + 1) * self.seq_len)
            .collect();
        Batch {
            inputs: self.inputs.select_rows(&rows),
            seq_len: self.seq_len,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneConfig {
    Mlp(MlpConfig),
    Transformer(TransformerConfig),
}

impl BackboneConfig {
    pub fn classes(&self) -> usize {
        match self {
            BackboneConfig::Mlp(c) => c.classes,
            BackboneConfig::Transformer(c) => c.classes,
        }
    }

    pub fn input(&self) -> usize {
        match self {
            BackboneConfig::Mlp(c) => c.input,
            BackboneConfig::Transformer(c) => c.input,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            BackboneConfig::Mlp(_) => 1,
            BackboneConfig::Transformer(c) => c.seq_len,
        }
    }

    pub fn adapter_sites(&self, mode: AdapterMode) -> Vec<(SiteId, usize, usize)> {
        match self {
            BackboneConfig::Mlp(c) => c.adapter_sites(),
            BackboneConfig::Transformer(c) => c.adapter_sites(mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Mlp(Mlp),
    Transformer(Transformer),
}

enum Tape {
    Mlp(mlp::MlpTape),
    Transformer(transformer::TransformerTape),
}

impl Backbone {
    pub fn init(config: &BackboneConfig, rng: &mut RngStream) -> Result<Self> {
        Ok(match config {
            BackboneConfig::Mlp(c) => Backbone::Mlp(Mlp::new(c.clone(), rng)?),
            BackboneConfig::Transformer(c) => {
                Backbone::Transformer(Transformer::new(c.clone(), rng)?)
            }
        })
    }

    pub fn config(&self) -> BackboneConfig {
        match self {
            Backbone::Mlp(m) => BackboneConfig::Mlp(m.config.clone()),
            Backbone::Transformer(t) => BackboneConfig::Transformer(t.config.clone()),
        }
    }

    pub fn classes(&self) -> usize {
        self.config().classes()
    }

    pub fn head(&self) -> &DenseLayer {
        match self {
            Backbone::Mlp(m) => &m.head,
            Backbone::Transformer(t) => &t.head,
        }
    }

    /// Frozen host weight of `site`.
    pub fn site_weight(&self, site: SiteId) -> Option<&Matrix> {
        use crate::adapters::SiteKind::*;
        match self {
            Backbone::Mlp(m) => m
                .layers
                .iter()
                .find(|l| l.site == Some(site))
                .map(|l| &l.w0),
            Backbone::Transformer(t) => {
                let b = t.blocks.get(site.layer)?;
                match site.kind {
                    Query => Some(&b.wq.w0),
                    Value => Some(&b.wv.w0),
                    AttnOut => Some(&b.wo.w0),
                    FcOut => Some(&b.fc2.w0),
                    Dense => None,
                }
            }
        }
    }

    fn forward_tape(&self, batch: &Batch, adapters: &AdapterSet) -> Result<(Matrix, Tape)> {
        match self {
            Backbone::Mlp(m) => {
                if batch.seq_len != 1 {
                    return Err(Error::invalid("mlp expects one row per example"));
                }
                let (l, t) = m.forward_tape(&batch.inputs, adapters)?;
                Ok((l, Tape::Mlp(t)))
            }
            Backbone::Transformer(t) => {
                let (l, tape) = t.forward_tape(&batch.inputs, batch.seq_len, adapters)?;
                Ok((l, Tape::Transformer(tape)))
            }
        }
    }

    /// Logits, batch×classes.
    pub fn forward(&self, batch: &Batch, adapters: &AdapterSet) -> Result<Matrix> {
        Ok(self.forward_tape(batch, adapters)?.0)
    }

    pub fn predict_proba(&self, batch: &Batch, adapters: &AdapterSet) -> Result<Matrix> {
        Ok(softmax(&self.forward(batch, adapters)?))
    }

    fn check_labels(&self, batch: &Batch) -> Result<()> {
        let c = self.classes();
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy and its gradient w.r.t. the selected adapter
    /// parameters (`None` = every trainable one), in pack order.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        adapters: &AdapterSet,
        trainable: Option<&[ParamId]>,
    ) -> Result<(f64, JointParamVector)> {
        self.check_labels(batch)?;
        let mut grads = adapters.grad_buffers(trainable)?;
        let (logits, tape) = self.forward_tape(batch, adapters)?;
        let (loss, dlogits) = cross_entropy_with_grad(&logits, &batch.labels);
        match (self, &tape) {
            (Backbone::Mlp(m), Tape::Mlp(t)) => {
                m.backward(t, &dlogits, adapters, &mut grads, None)?
            }
            (Backbone::Transformer(tr), Tape::Transformer(t)) => {
                tr.backward(t, &dlogits, batch.seq_len, adapters, &mut grads, None)?
            }
            _ => unreachable!("tape matches backbone"),
        }
        Ok((loss, grads.into_joint()))
    }

    /// Loss and gradients for every backbone weight (no adapters), flattened
    /// in [`Backbone::tensors`] order.
    pub fn full_loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.check_labels(batch)?;
        let adapters = AdapterSet::new();
        let mut none = adapters.grad_buffers(Some(&[]))?;
        let (logits, tape) = self.forward_tape(batch, &adapters)?;
        let (loss, dlogits) = cross_entropy_with_grad(&logits, &batch.labels);
        let grads = match (self, &tape) {
            (Backbone::Mlp(m), Tape::Mlp(t)) => {
                let mut g = m.zeros_like();
                m.backward(t, &dlogits, &adapters, &mut none, Some(&mut g))?;
                Backbone::Mlp(g)
            }
            (Backbone::Transformer(tr), Tape::Transformer(t)) => {
                let mut g = tr.zeros_like();
                tr.backward(
                    t,
                    &dlogits,
                    batch.seq_len,
                    &adapters,
                    &mut none,
                    Some(&mut g),
                )?;
                Backbone::Transformer(g)
            }
            _ => unreachable!("tape matches backbone"),
        };
        Ok((loss, grads.flat_params()))
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Backbone::Mlp(m) => m.tensors(),
            Backbone::Transformer(t) => t.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Backbone::Mlp(m) => m.tensors_mut(),
            Backbone::Transformer(t) => t.tensors_mut(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != total {
            return Err(Error::invalid(format!(
                "flat parameter length {} does not match backbone size {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    transformer::softmax_rows_in_place(&mut p);
    p
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean negative log-softmax probability of the true class.
pub fn loss(logits: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(
        logits.rows(),
        labels.len(),
        "logit rows must match label count"
    );
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_softmax_row(logits.row(i))[y])
        .sum();
    (total / labels.len() as f64).max(0.0)
}

fn cross_entropy_with_grad(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = labels.len() as f64;
    let mut grad = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        let v = grad.get(i, y);
        grad.set(i, y, v - 1.0);
    }
    grad.scale_in_place(1.0 / n);
    (loss(logits, labels), grad)
}

#[cfg(test)]
mod tests;
