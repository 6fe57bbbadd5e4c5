//! Synthetic source/target task pairs.
//!
//! The source task is drawn straight from a family generator. The target
//! task uses the same generator with a shift applied: a rotation of the
//! first two input features, a tilted class prior and symmetric label noise.
//! Every split reads its own labelled RNG stream, and label noise reads a
//! separate stream again, so changing `label_noise` never moves an input.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Batch;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Blobs2d,
    Moons2d,
    SeqMajority,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Blobs2d => "blobs2d",
            Family::Moons2d => "moons2d",
            Family::SeqMajority => "seq-majority",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs2d" => Ok(Family::Blobs2d),
            "moons2d" => Ok(Family::Moons2d),
            "seq-majority" => Ok(Family::SeqMajority),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset family `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub family: Family,
    pub classes: usize,
    pub n_source: usize,
    pub n_target_train: usize,
    /// Size of each validation split.
    pub n_val: usize,
    /// Within-class spread.
    pub noise: f64,
    /// Blob centre distance from the origin (blobs2d only).
    pub radius: f64,
    /// Sequence length (seq-majority only).
    pub seq_len: usize,
    /// Rotation angle φ in radians applied to the first two target features.
    pub rotation: f64,
    /// Probability ρ that a target label is replaced by a different class.
    pub label_noise: f64,
    /// Target prior `p_c ∝ exp(tilt·c/(C−1))`; 0 keeps classes balanced.
    pub prior_tilt: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            family: Family::Blobs2d,
            classes: 3,
            n_source: 2000,
            n_target_train: 200,
            n_val: 1000,
            noise: 1.0,
            radius: 2.0,
            seq_len: 8,
            rotation: 0.0,
            label_noise: 0.0,
            prior_tilt: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("dataset needs at least two classes"));
        }
        if self.family == Family::Moons2d && self.classes != 2 {
            return Err(Error::invalid("moons2d has exactly two classes"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::invalid("label_noise must lie in [0, 1)"));
        }
        if self.family == Family::SeqMajority && self.seq_len == 0 {
            return Err(Error::invalid("seq_len must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        Ok(())
    }

    /// Feature width of one sequence position.
    pub fn features(&self) -> usize {
        match self.family {
            Family::Blobs2d | Family::Moons2d => 2,
            Family::SeqMajority => self.classes.max(2),
        }
    }

    /// Rows per example.
    pub fn rows_per_example(&self) -> usize {
        match self.family {
            Family::SeqMajority => self.seq_len,
            _ => 1,
        }
    }

    pub fn is_null_shift(&self) -> bool {
        self.rotation == 0.0 && self.label_noise == 0.0 && self.prior_tilt == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Batch,
    pub val: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub source: Task,
    pub target: Task,
}

/// Shift parameters applied on top of the family generator.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Shift {
    rotation: f64,
    label_noise: f64,
    prior_tilt: f64,
}

const NO_SHIFT: Shift = Shift {
    rotation: 0.0,
    label_noise: 0.0,
    prior_tilt: 0.0,
};

pub fn make_dataset(spec: &DatasetSpec) -> Result<DatasetPair> {
    spec.validate()?;
    let root = RngStream::new(spec.seed).derive("dataset");
    let shift = Shift {
        rotation: spec.rotation,
        label_noise: spec.label_noise,
        prior_tilt: spec.prior_tilt,
    };
    Ok(DatasetPair {
        source: Task {
            train: draw(spec, spec.n_source, NO_SHIFT, &root.derive("source/train"))?,
            val: draw(spec, spec.n_val, NO_SHIFT, &root.derive("source/val"))?,
        },
        target: Task {
            train: draw(
                spec,
                spec.n_target_train,
                shift,
                &root.derive("target/train"),
            )?,
            val: draw(spec, spec.n_val, shift, &root.derive("target/val"))?,
        },
    })
}

fn class_prior(classes: usize, tilt: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..classes)
        .map(|c| (tilt * c as f64 / (classes - 1) as f64).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn sample_class(prior: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (c, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    prior.len() - 1
}

fn draw(spec: &DatasetSpec, n: usize, shift: Shift, stream: &RngStream) -> Result<Batch> {
    let mut class_rng = stream.derive("class");
    let mut input_rng = stream.derive("input");
    let mut noise_rng = stream.derive("label-noise");
    let prior = class_prior(spec.classes, shift.prior_tilt);
    let rows = spec.rows_per_example();
    let f = spec.features();
    let mut data = Vec::with_capacity(n * rows * f);
    let mut labels = Vec::with_capacity(n);
    let (sin, cos) = shift.rotation.sin_cos();
    for _ in 0..n {
        let c = sample_class(&prior, &mut class_rng);
        let start = data.len();
        let label = match spec.family {
            Family::Blobs2d => {
                let angle = TAU * c as f64 / spec.classes as f64;
                data.push(spec.radius * angle.cos() + spec.noise * input_rng.normal());
                data.push(spec.radius * angle.sin() + spec.noise * input_rng.normal());
                c
            }
            Family::Moons2d => {
                let t = std::f64::consts::PI * input_rng.uniform();
                let (x, y) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                data.push(x + spec.noise * input_rng.normal());
                data.push(y + spec.noise * input_rng.normal());
                c
            }
            Family::SeqMajority => seq_example(spec, c, &mut input_rng, &mut data),
        };
        if shift.rotation != 0.0 {
            for r in 0..rows {
                let i = start + r * f;
                let (x, y) = (data[i], data[i + 1]);
                data[i] = cos * x - sin * y;
                data[i + 1] = sin * x + cos * y;
            }
        }
        labels.push(label);
    }
    if shift.label_noise > 0.0 {
        for y in &mut labels {
            if noise_rng.uniform() < shift.label_noise {
                let other = noise_rng.below(spec.classes - 1);
                *y = if other >= *y { other + 1 } else { other };
            }
        }
    }
    Batch::new(Matrix::new(n * rows, f, data)?, rows, labels)
}

/// Tokens are noisy one-hot class symbols. The sequence is built so that
/// `favoured` is the strict majority symbol, which is also the label.
fn seq_example(
    spec: &DatasetSpec,
    favoured: usize,
    rng: &mut RngStream,
    out: &mut Vec<f64>,
) -> usize {
    let l = spec.seq_len;
    let c = spec.classes;
    let f = spec.features();
    let mut counts = vec![0usize; c];
    let mut tokens = Vec::with_capacity(l);
    // At least ⌊l/2⌋+1 positions carry the favoured symbol.
    let majority = l / 2 + 1;
    for i in 0..l {
        let t = if i < majority || rng.uniform() < 1.0 / c as f64 {
            favoured
        } else {
            rng.below(c)
        };
        counts[t] += 1;
        tokens.push(t);
    }
    rng.shuffle(&mut tokens);
    for t in tokens {
        for j in 0..f {
            let v = if j == t { 1.0 } else { 0.0 };
            out.push(v + spec.noise * rng.normal());
        }
    }
    debug_assert_eq!(
        counts
            .iter()
            .enumerate()
            .max_by_key(|(_, n)| **n)
            .map(|(i, _)| i),
        Some(favoured)
    );
    favoured
}
