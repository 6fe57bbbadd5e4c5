use serde::{Deserialize, Serialize};

use super::dense::{DenseLayer, DenseTape};
use crate::adapters::{AdapterGrads, AdapterSet, SiteId, SiteKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => z.map(f64::tanh),
            Activation::Identity => z.clone(),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, a: &Matrix, da: &Matrix) -> Result<Matrix> {
        match self {
            Activation::Tanh => da.hadamard(&a.map(|v| 1.0 - v * v)),
            Activation::Identity => Ok(da.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    /// Also adapt the input→hidden layer. Off by default: its rank is capped
    /// by the input dimension.
    pub adapt_input_layer: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input: 2,
            hidden: vec![32, 32],
            classes: 3,
            activation: Activation::Tanh,
            adapt_input_layer: false,
        }
    }
}

impl MlpConfig {
    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input];
        d.extend(&self.hidden);
        d
    }

    /// Hidden dense layers carry adapters; the head never does.
    pub fn adapter_sites(&self) -> Vec<(SiteId, usize, usize)> {
        let d = self.dims();
        (0..self.hidden.len())
            .filter(|&i| i >= 1 || self.adapt_input_layer)
            .map(|i| (SiteId::new(i, SiteKind::Dense), d[i], d[i + 1]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid mlp shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<DenseLayer>,
    pub head: DenseLayer,
}

pub(crate) struct MlpTape {
    dense: Vec<DenseTape>,
    acts: Vec<Matrix>,
    head: DenseTape,
}

impl Mlp {
    pub fn new(config: MlpConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.dims();
        let sites = config.adapter_sites();
        let layers = (0..config.hidden.len())
            .map(|i| {
                let layer = DenseLayer::random(d[i], d[i + 1], rng);
                match sites.iter().find(|(s, _, _)| s.layer == i) {
                    Some((s, _, _)) => layer.with_site(*s),
                    None => layer,
                }
            })
            .collect();
        let last = *d.last().expect("nonempty dims");
        let head = DenseLayer::random(last, config.classes, rng).as_head();
        Ok(Self {
            config,
            layers,
            head,
        })
    }

    /// Assemble from explicit layers (site assignment follows the config).
    pub fn from_layers(
        config: MlpConfig,
        layers: Vec<DenseLayer>,
        head: DenseLayer,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dims();
        if layers.len() != config.hidden.len() {
            return Err(Error::Config(
                "layer count does not match hidden sizes".into(),
            ));
        }
        let sites = config.adapter_sites();
        let mut fixed = Vec::with_capacity(layers.len());
        for (i, mut l) in layers.into_iter().enumerate() {
            if l.w0.shape() != (d[i], d[i + 1]) || l.bias.len() != d[i + 1] {
                return Err(Error::Shape {
                    op: "mlp layer",
                    left: (d[i], d[i + 1]),
                    right: l.w0.shape(),
                });
            }
            l.site = sites
                .iter()
                .find(|(s, _, _)| s.layer == i)
                .map(|(s, _, _)| *s);
            l.head = false;
            fixed.push(l);
        }
        let last = *d.last().expect("nonempty dims");
        if head.w0.shape() != (last, config.classes) {
            return Err(Error::Shape {
                op: "mlp head",
                left: (last, config.classes),
                right: head.w0.shape(),
            });
        }
        Ok(Self {
            config,
            layers: fixed,
            head: DenseLayer {
                site: None,
                head: true,
                ..head
            },
        })
    }

    pub(crate) fn forward_tape(
        &self,
        x: &Matrix,
        adapters: &AdapterSet,
    ) -> Result<(Matrix, MlpTape)> {
        if x.cols() != self.config.input {
            return Err(Error::Shape {
                op: "mlp forward",
                left: (x.rows(), self.config.input),
                right: x.shape(),
            });
        }
        let mut dense = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (z, tape) = layer.forward(&h, adapters)?;
            h = self.config.activation.apply(&z);
            dense.push(tape);
            acts.push(h.clone());
        }
        let (logits, head) = self.head.forward(&h, adapters)?;
        Ok((logits, MlpTape { dense, acts, head }))
    }

    pub(crate) fn backward(
        &self,
        tape: &MlpTape,
        dlogits: &Matrix,
        adapters: &AdapterSet,
        grads: &mut AdapterGrads,
        mut full: Option<&mut Mlp>,
    ) -> Result<()> {
        let need_any_dx = !self.layers.is_empty();
        let mut dh = self.head.backward(
            &tape.head,
            dlogits,
            adapters,
            grads,
            full.as_mut().map(|f| &mut f.head),
            need_any_dx,
        )?;
        for i in (0..self.layers.len()).rev() {
            let da = dh.take().expect("dx requested");
            let dz = self
                .config
                .activation
                .grad_from_output(&tape.acts[i], &da)?;
            let g = full.as_mut().map(|f| &mut f.layers[i]);
            dh = self.layers[i].backward(&tape.dense[i], &dz, adapters, grads, g, i > 0)?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.layers.iter().chain(std::iter::once(&self.head)) {
            out.push(l.w0.data());
            out.push(&l.bias[..]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
        {
            out.push(l.w0.data_mut());
            out.push(&mut l.bias[..]);
        }
        out
    }
}
