//! Accuracy, NLL, Brier score and expected calibration error.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

pub const NLL_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 15;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn nll(probs: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(i, y).max(NLL_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

pub fn brier(probs: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            probs
                .row(i)
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    let t = if c == y { 1.0 } else { 0.0 };
                    (p - t).powi(2)
                })
                .sum::<f64>()
        })
        .sum();
    total / labels.len() as f64
}

/// One reliability-diagram bin, `(lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    /// Mean max-probability in the bin (0 when empty).
    pub mean_conf: f64,
    /// Fraction correct in the bin (0 when empty).
    pub acc: f64,
}

/// Equal-width ECE over max-probability confidence with right-closed bins.
pub fn ece(probs: &Matrix, labels: &[usize], n_bins: usize) -> (f64, Vec<ReliabilityBin>) {
    assert!(n_bins >= 1, "need at least one bin");
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let conf = row[pred];
        // Bin b covers (b/B, (b+1)/B]; confidence 0 joins the first bin.
        let b = ((conf * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_conf, acc) = if count[b] > 0 {
                let c = count[b] as f64;
                (conf_sum[b] / c, correct[b] as f64 / c)
            } else {
                (0.0, 0.0)
            };
            total += count[b] as f64 / n * (acc - mean_conf).abs();
            ReliabilityBin {
                bin_lo: b as f64 / n_bins as f64,
                bin_hi: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_conf,
                acc,
            }
        })
        .collect();
    (total, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub brier: f64,
    pub n: usize,
    pub bins: Vec<ReliabilityBin>,
}

pub fn evaluate(probs: &Matrix, labels: &[usize], n_bins: usize) -> EvalResult {
    let (e, bins) = ece(probs, labels, n_bins);
    EvalResult {
        accuracy: accuracy(probs, labels),
        nll: nll(probs, labels),
        ece: e,
        brier: brier(probs, labels),
        n: labels.len(),
        bins,
    }
}
