//! Single-head pre-norm transformer encoder with mean pooling.
//!
//! Token rows of the whole batch are stacked into one `(batch·seq)×d` matrix
//! for the dense layers; attention runs per sequence.

use serde::{Deserialize, Serialize};

use super::dense::{DenseLayer, DenseTape};
use crate::adapters::{AdapterGrads, AdapterMode, AdapterSet, SiteId, SiteKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngStream;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    /// Per-token feature width.
    pub input: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub seq_len: usize,
    pub classes: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            input: 3,
            d_model: 16,
            d_ff: 32,
            blocks: 2,
            seq_len: 12,
            classes: 3,
        }
    }
}

impl TransformerConfig {
    /// LoRA-XS adapts Q, V, attention output and FFN output; LoRA only Q, V.
    pub fn adapter_sites(&self, mode: AdapterMode) -> Vec<(SiteId, usize, usize)> {
        let d = self.d_model;
        let mut out = Vec::new();
        for l in 0..self.blocks {
            out.push((SiteId::new(l, SiteKind::Query), d, d));
            out.push((SiteId::new(l, SiteKind::Value), d, d));
            if mode == AdapterMode::LoraXs {
                out.push((SiteId::new(l, SiteKind::AttnOut), d, d));
                out.push((SiteId::new(l, SiteKind::FcOut), self.d_ff, d));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.seq_len == 0
            || self.classes < 2
        {
            return Err(Error::Config(format!("invalid transformer shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

struct LnTape {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gamma: vec![0.0; self.gamma.len()],
            beta: vec![0.0; self.beta.len()],
        }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, LnTape) {
        let d = x.cols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let mut y = xhat.clone();
        for i in 0..y.rows() {
            for ((v, g), b) in y.row_mut(i).iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = *v * g + b;
            }
        }
        (y, LnTape { xhat, inv_std })
    }

    fn backward(&self, tape: &LnTape, dy: &Matrix, full: Option<&mut LayerNorm>) -> Matrix {
        let n = dy.cols() as f64;
        if let Some(g) = full {
            for i in 0..dy.rows() {
                for (j, (&d, &xh)) in dy.row(i).iter().zip(tape.xhat.row(i)).enumerate() {
                    g.gamma[j] += d * xh;
                    g.beta[j] += d;
                }
            }
        }
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        for i in 0..dy.rows() {
            let xh = tape.xhat.row(i);
            let dxhat: Vec<f64> = dy
                .row(i)
                .iter()
                .zip(&self.gamma)
                .map(|(d, g)| d * g)
                .collect();
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            let inv = tape.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: DenseLayer,
    pub wk: DenseLayer,
    pub wv: DenseLayer,
    pub wo: DenseLayer,
    pub ln2: LayerNorm,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

struct BlockTape {
    ln1: LnTape,
    q: (Matrix, DenseTape),
    k: (Matrix, DenseTape),
    v: (Matrix, DenseTape),
    /// Attention probabilities per sequence.
    probs: Vec<Matrix>,
    o: DenseTape,
    ln2: LnTape,
    fc1: DenseTape,
    act: Matrix,
    fc2: DenseTape,
}

impl TransformerBlock {
    fn new(layer: usize, d: usize, ff: usize, rng: &mut RngStream) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            wq: DenseLayer::random(d, d, rng).with_site(SiteId::new(layer, SiteKind::Query)),
            wk: DenseLayer::random(d, d, rng),
            wv: DenseLayer::random(d, d, rng).with_site(SiteId::new(layer, SiteKind::Value)),
            wo: DenseLayer::random(d, d, rng).with_site(SiteId::new(layer, SiteKind::AttnOut)),
            ln2: LayerNorm::new(d),
            fc1: DenseLayer::random(d, ff, rng),
            fc2: DenseLayer::random(ff, d, rng).with_site(SiteId::new(layer, SiteKind::FcOut)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            ln2: self.ln2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    fn dense_layers(&self) -> [&DenseLayer; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.fc1, &self.fc2]
    }

    fn forward(
        &self,
        h: &Matrix,
        seq: usize,
        adapters: &AdapterSet,
    ) -> Result<(Matrix, BlockTape)> {
        let d = h.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let (z1, ln1) = self.ln1.forward(h);
        let q = self.wq.forward(&z1, adapters)?;
        let k = self.wk.forward(&z1, adapters)?;
        let v = self.wv.forward(&z1, adapters)?;
        let batches = h.rows() / seq;
        let mut att = Matrix::zeros(h.rows(), d);
        let mut probs = Vec::with_capacity(batches);
        for b in 0..batches {
            let qb = q.0.row_block(b * seq, seq);
            let kb = k.0.row_block(b * seq, seq);
            let vb = v.0.row_block(b * seq, seq);
            let mut p = qb.matmul_t(&kb)?;
            p.scale_in_place(scale);
            softmax_rows_in_place(&mut p);
            att.set_row_block(b * seq, &p.matmul(&vb)?);
            probs.push(p);
        }
        let (a, o) = self.wo.forward(&att, adapters)?;
        let h1 = h.add(&a)?;
        let (z2, ln2) = self.ln2.forward(&h1);
        let (f1, fc1) = self.fc1.forward(&z2, adapters)?;
        let act = f1.map(f64::tanh);
        let (f2, fc2) = self.fc2.forward(&act, adapters)?;
        let h2 = h1.add(&f2)?;
        Ok((
            h2,
            BlockTape {
                ln1,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                fc1,
                act,
                fc2,
            },
        ))
    }

    fn backward(
        &self,
        tape: &BlockTape,
        dh2: &Matrix,
        seq: usize,
        adapters: &AdapterSet,
        grads: &mut AdapterGrads,
        mut full: Option<&mut TransformerBlock>,
    ) -> Result<Matrix> {
        let d = dh2.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dh1 = dh2.clone();

        let dact = self
            .fc2
            .backward(
                &tape.fc2,
                dh2,
                adapters,
                grads,
                full.as_mut().map(|f| &mut f.fc2),
                true,
            )?
            .expect("dx");
        let df1 = dact.hadamard(&tape.act.map(|v| 1.0 - v * v))?;
        let dz2 = self
            .fc1
            .backward(
                &tape.fc1,
                &df1,
                adapters,
                grads,
                full.as_mut().map(|f| &mut f.fc1),
                true,
            )?
            .expect("dx");
        dh1.add_assign(
            &self
                .ln2
                .backward(&tape.ln2, &dz2, full.as_mut().map(|f| &mut f.ln2)),
        )?;

        let datt = self
            .wo
            .backward(
                &tape.o,
                &dh1,
                adapters,
                grads,
                full.as_mut().map(|f| &mut f.wo),
                true,
            )?
            .expect("dx");
        let rows = dh2.rows();
        let (mut dq, mut dk, mut dv) = (
            Matrix::zeros(rows, d),
            Matrix::zeros(rows, d),
            Matrix::zeros(rows, d),
        );
        for (b, p) in tape.probs.iter().enumerate() {
            let qb = tape.q.0.row_block(b * seq, seq);
            let kb = tape.k.0.row_block(b * seq, seq);
            let vb = tape.v.0.row_block(b * seq, seq);
            let dob = datt.row_block(b * seq, seq);
            let dp = dob.matmul_t(&vb)?;
            dv.set_row_block(b * seq, &p.t_matmul(&dob)?);
            let mut ds = Matrix::zeros(seq, seq);
            for i in 0..seq {
                let dot: f64 = dp.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..seq {
                    ds.set(i, j, p.get(i, j) * (dp.get(i, j) - dot) * scale);
                }
            }
            dq.set_row_block(b * seq, &ds.matmul(&kb)?);
            dk.set_row_block(b * seq, &ds.t_matmul(&qb)?);
        }
        let mut dz1 = self
            .wq
            .backward(
                &tape.q.1,
                &dq,
                adapters,
                grads,
                full.as_mut().map(|f| &mut f.wq),
                true,
            )?
            .expect("dx");
        dz1.add_assign(
            &self
                .wk
                .backward(
                    &tape.k.1,
                    &dk,
                    adapters,
                    grads,
                    full.as_mut().map(|f| &mut f.wk),
                    true,
                )?
                .expect("dx"),
        )?;
        dz1.add_assign(
            &self
                .wv
                .backward(
                    &tape.v.1,
                    &dv,
                    adapters,
                    grads,
                    full.as_mut().map(|f| &mut f.wv),
                    true,
                )?
                .expect("dx"),
        )?;
        dh1.add_assign(
            &self
                .ln1
                .backward(&tape.ln1, &dz1, full.as_mut().map(|f| &mut f.ln1)),
        )?;
        Ok(dh1)
    }
}

pub(crate) fn softmax_rows_in_place(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub embed: DenseLayer,
    pub blocks: Vec<TransformerBlock>,
    pub head: DenseLayer,
}

pub(crate) struct TransformerTape {
    embed: DenseTape,
    blocks: Vec<BlockTape>,
    head: DenseTape,
}

impl Transformer {
    pub fn new(config: TransformerConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let embed = DenseLayer::random(config.input, config.d_model, rng);
        let blocks = (0..config.blocks)
            .map(|l| TransformerBlock::new(l, config.d_model, config.d_ff, rng))
            .collect();
        let head = DenseLayer::random(config.d_model, config.classes, rng).as_head();
        Ok(Self {
            config,
            embed,
            blocks,
            head,
        })
    }

    pub(crate) fn forward_tape(
        &self,
        x: &Matrix,
        seq: usize,
        adapters: &AdapterSet,
    ) -> Result<(Matrix, TransformerTape)> {
        if x.cols() != self.config.input
            || seq != self.config.seq_len
            || !x.rows().is_multiple_of(seq)
        {
            return Err(Error::Shape {
                op: "transformer forward",
                left: (self.config.seq_len, self.config.input),
                right: (seq, x.cols()),
            });
        }
        let (mut h, embed) = self.embed.forward(x, adapters)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (h2, t) = blk.forward(&h, seq, adapters)?;
            h = h2;
            blocks.push(t);
        }
        let n = x.rows() / seq;
        let pooled = Matrix::from_fn(n, self.config.d_model, |b, j| {
            (0..seq).map(|t| h.get(b * seq + t, j)).sum::<f64>() / seq as f64
        });
        let (logits, head) = self.head.forward(&pooled, adapters)?;
        Ok((
            logits,
            TransformerTape {
                embed,
                blocks,
                head,
            },
        ))
    }

    pub(crate) fn backward(
        &self,
        tape: &TransformerTape,
        dlogits: &Matrix,
        seq: usize,
        adapters: &AdapterSet,
        grads: &mut AdapterGrads,
        mut full: Option<&mut Transformer>,
    ) -> Result<()> {
        let dpooled = self
            .head
            .backward(
                &tape.head,
                dlogits,
                adapters,
                grads,
                full.as_mut().map(|f| &mut f.head),
                true,
            )?
            .expect("dx");
        let n = dpooled.rows();
        let mut dh = Matrix::from_fn(n * seq, self.config.d_model, |r, j| {
            dpooled.get(r / seq, j) / seq as f64
        });
        for (l, blk) in self.blocks.iter().enumerate().rev() {
            let g = full.as_mut().map(|f| &mut f.blocks[l]);
            dh = blk.backward(&tape.blocks[l], &dh, seq, adapters, grads, g)?;
        }
        self.embed.backward(
            &tape.embed,
            &dh,
            adapters,
            grads,
            full.as_mut().map(|f| &mut f.embed),
            false,
        )?;
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed: self.embed.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(TransformerBlock::zeros_like)
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embed.w0.data(), &self.embed.bias[..]];
        for b in &self.blocks {
            out.push(&b.ln1.gamma[..]);
            out.push(&b.ln1.beta[..]);
            for l in b.dense_layers() {
                out.push(l.w0.data());
                out.push(&l.bias[..]);
            }
            out.push(&b.ln2.gamma[..]);
            out.push(&b.ln2.beta[..]);
        }
        out.push(self.head.w0.data());
        out.push(&self.head.bias[..]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embed.w0.data_mut(), &mut self.embed.bias[..]];
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gamma[..]);
            out.push(&mut b.ln1.beta[..]);
            for l in [
                &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.fc1, &mut b.fc2,
            ] {
                out.push(l.w0.data_mut());
                out.push(&mut l.bias[..]);
            }
            out.push(&mut b.ln2.gamma[..]);
            out.push(&mut b.ln2.beta[..]);
        }
        out.push(self.head.w0.data_mut());
        out.push(&mut self.head.bias[..]);
        out
    }
}
