// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multinomial logistic probes and usable-information estimates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1.0,
            test_fraction: 0.25,
            seed: 42,
        }
    }
}

/// Standardisation followed by an affine softmax classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `d × n_classes`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_classes: usize,
}

impl LinearProbe {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn log_probs_std(&self, z: &[f64]) -> Vec<f64> {
        let c = self.n_classes;
        let mut logits = self.bias.clone();
        for (i, zi) in z.iter().enumerate() {
            let row = &self.weights[i * c..(i + 1) * c];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += zi * w;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }

    pub fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        self.log_probs_std(&self.standardize(x))
    }

    /// Highest-probability class; the lowest index wins ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let lp = self.log_probs(x);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub probe: LinearProbe,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Held-out accuracy.
    pub accuracy: f64,
    /// Mean held-out negative log-likelihood, nats.
    pub heldout_nll: f64,
}

impl ProbeFit {
    /// Standard error of the held-out accuracy.
    pub fn std_error(&self) -> f64 {
        let n = self.test_idx.len() as f64;
        (self.accuracy * (1.0 - self.accuracy) / n).sqrt()
    }
}

/// Fits a probe by full-batch gradient descent from zero on a seeded
/// train/test split of `features`.
pub fn train_linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeFit> {
    let n = features.len();
    if n < 2 || labels.len() != n {
        return Err(Error::contract(format!(
            "probe needs ≥ 2 examples with one label each, got {n} features and {} labels",
            labels.len()
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::contract("probe features must share one nonzero width"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::OutOfRange {
            what: "probe label",
            index: bad,
            limit: n_classes,
        });
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) || cfg.test_fraction == 0.0 {
        return Err(Error::config("probe test fraction must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let mut present = vec![false; n_classes];
    train_idx.iter().for_each(|&i| present[labels[i]] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::contract("probe train split contains a single class"));
    }

    let m = train_idx.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train_idx {
        mean.iter_mut().zip(&features[i]).for_each(|(a, v)| *a += v / m);
    }
    let mut scale = vec![0.0; d];
    for &i in &train_idx {
        scale
            .iter_mut()
            .zip(&features[i])
            .zip(&mean)
            .for_each(|((s, v), mu)| *s += (v - mu).powi(2) / m);
    }
    scale
        .iter_mut()
        .for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });

    let c = n_classes;
    let mut probe = LinearProbe {
        mean,
        scale,
        weights: vec![0.0; d * c],
        bias: vec![0.0; c],
        n_classes,
    };
    let train_z: Vec<Vec<f64>> = train_idx.iter().map(|&i| probe.standardize(&features[i])).collect();
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    for _ in 0..cfg.steps {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (z, &i) in train_z.iter().zip(&train_idx) {
            let lp = probe.log_probs_std(z);
            let resid: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(k, l)| l.exp() - if k == labels[i] { 1.0 } else { 0.0 })
                .collect();
            for (j, zj) in z.iter().enumerate() {
                for (g, r) in gw[j * c..(j + 1) * c].iter_mut().zip(&resid) {
                    *g += zj * r;
                }
            }
            gb.iter_mut().zip(&resid).for_each(|(g, r)| *g += r);
        }
        let step = cfg.lr / m;
        probe.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
        probe.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
    }

    let mut correct = 0usize;
    let mut nll = 0.0;
    for &i in &test_idx {
        let lp = probe.log_probs(&features[i]);
        nll -= lp[labels[i]];
        correct += (probe.predict(&features[i]) == labels[i]) as usize;
    }
    Ok(ProbeFit {
        accuracy: correct as f64 / n_test as f64,
        heldout_nll: nll / n_test as f64,
        probe,
        train_idx,
        test_idx,
    })
}

/// A constant one-dimensional representation for `n` examples.
pub fn null_features(n: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0]; n]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VInfo {
    /// Clamped estimate, nats.
    pub nats: f64,
    /// Unclamped `H_V(Y) − H_V(Y|R)`.
    pub raw: f64,
    pub clamped: bool,
}

/// `H_V(Y) − H_V(Y|R)` with both terms estimated as held-out NLL of probes
/// on the same split; negative estimates are clamped to zero and flagged.
pub fn v_usable_info(real: &ProbeFit, null: &ProbeFit) -> Result<VInfo> {
    if real.test_idx != null.test_idx || real.train_idx != null.train_idx {
        return Err(Error::contract(
            "usable information needs probes trained on the same split",
        ));
    }
    if real.probe.n_classes != null.probe.n_classes {
        return Err(Error::contract(
            "usable information needs probes over the same label set",
        ));
    }
    let raw = null.heldout_nll - real.heldout_nll;
    Ok(VInfo {
        nats: raw.max(0.0),
        raw,
        clamped: raw < 0.0,
    })
}
