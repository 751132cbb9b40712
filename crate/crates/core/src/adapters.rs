// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank adapters on the seven projection sites of selected blocks.
//!
//! An adapted projection computes `x·W + (alpha/r)·(drop(x)·A)·B` with `A`
//! (`d_in × r`) drawn scaled-normal and `B` (`r × d_out`) zero, so attaching
//! never changes the model until `B` is trained.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::model::{forward, BoundAdapters, ForwardOutput, Injection, ModelConfig, Site, Weights};

const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub target_sites: Vec<Site>,
    pub target_layers: Vec<usize>,
}

impl AdapterSpec {
    /// r = 16, alpha = 32, dropout 0.05 on all seven sites of `layers`.
    pub fn standard(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout_p: 0.05,
            target_sites: Site::ALL.to_vec(),
            target_layers: layers.into_iter().collect(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "adapter dropout {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("adapter alpha must be finite"));
        }
        for &l in &self.target_layers {
            cfg.check_layer(l)
                .map_err(|_| Error::config(format!("adapter layer {l} outside [0, {})", cfg.n_layers)))?;
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// (layer, site) pairs, deduplicated and ordered.
    pub fn sites(&self) -> BTreeSet<(usize, Site)> {
        self.target_layers
            .iter()
            .flat_map(|&l| self.target_sites.iter().map(move |&s| (l, s)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T = f32> {
    /// `d_in × r`.
    pub a: Tensor<T>,
    /// `r × d_out`.
    pub b: Tensor<T>,
}

/// Adapters for one spec, keyed by (layer, site).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T = f32> {
    pub spec: AdapterSpec,
    pub config: ModelConfig,
    pub entries: BTreeMap<(usize, Site), Adapter<T>>,
}

impl AdapterSet<f32> {
    pub fn new(config: ModelConfig, spec: AdapterSpec, seed: u64) -> Result<Self> {
        spec.validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, A_INIT_STD).expect("positive std");
        let entries = spec
            .sites()
            .into_iter()
            .map(|(l, site)| {
                let (d_in, d_out) = site.dims(&config);
                let a = Tensor::from_fn(&[d_in, spec.rank], |_| dist.sample(&mut rng) as f32);
                let b = Tensor::zeros(&[spec.rank, d_out]);
                ((l, site), Adapter { a, b })
            })
            .collect();
        Ok(Self { spec, config, entries })
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.str("adapters")
            .str(&serde_json::to_string(&self.spec).expect("spec serialises"));
        for (name, t) in self.named_tensors() {
            h.tensor(&name, t);
        }
        h.finish()
    }
}

impl<T: Real> AdapterSet<T> {
    pub fn scale(&self) -> f64 {
        self.spec.scale()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundAdapters<T> {
        let entries = self
            .entries
            .iter()
            .map(|(&key, ad)| {
                let a = tape.leaf(ad.a.clone(), trainable);
                let b = tape.leaf(ad.b.clone(), trainable);
                (key, (a, b))
            })
            .collect();
        BoundAdapters {
            scale: T::from_f64_lossy(self.scale()),
            dropout_p: self.spec.dropout_p,
            entries,
        }
    }

    /// `layers.{l}.{site}.A|B` for every adapter matrix, in key order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.entries
            .iter()
            .flat_map(|(&(l, s), ad)| {
                [
                    (format!("layers.{l}.{s}.A"), &ad.a),
                    (format!("layers.{l}.{s}.B"), &ad.b),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries
            .values_mut()
            .flat_map(|ad| [&mut ad.a, &mut ad.b])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|ad| ad.a.numel() + ad.b.numel()).sum()
    }

    /// Base weights with every delta folded in: `W' = W + (alpha/r)·A·B`.
    pub fn merge_into(&self, base: &Weights<T>) -> Weights<T> {
        let mut merged = base.clone();
        let scale = T::from_f64_lossy(self.scale());
        for (&(l, site), ad) in &self.entries {
            let (d_in, d_out) = site.dims(&base.config);
            let r = self.spec.rank;
            let mut delta = vec![T::zero(); d_in * d_out];
            T::gemm(
                d_in,
                r,
                d_out,
                scale,
                ad.a.data(),
                (r, 1),
                ad.b.data(),
                (d_out, 1),
                T::zero(),
                &mut delta,
                (d_out, 1),
            );
            let w = merged.layers[l].site_mut(site);
            for (wv, dv) in w.data_mut().iter_mut().zip(delta) {
                *wv = *wv + dv;
            }
        }
        merged
    }

    pub fn cast<U: Real>(&self) -> AdapterSet<U> {
        AdapterSet {
            spec: self.spec.clone(),
            config: self.config,
            entries: self
                .entries
                .iter()
                .map(|(&k, ad)| {
                    (
                        k,
                        Adapter {
                            a: ad.a.cast(),
                            b: ad.b.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Frozen base weights plus trainable adapters.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub base: Arc<Weights<f32>>,
    pub adapters: Option<AdapterSet<f32>>,
    /// Training mode enables adapter dropout.
    pub training: bool,
}

impl AdaptedModel {
    pub fn plain(base: Arc<Weights<f32>>) -> Self {
        Self {
            base,
            adapters: None,
            training: false,
        }
    }

    /// Attaches adapters for `spec`; a site may carry one adapter only.
    pub fn attach(&mut self, spec: AdapterSpec, seed: u64) -> Result<()> {
        if let Some(existing) = &self.adapters {
            let taken = existing.spec.sites();
            if let Some((l, s)) = spec.sites().into_iter().find(|k| taken.contains(k)) {
                return Err(Error::contract(format!(
                    "adapter already attached at layer {l} site {s}"
                )));
            }
            return Err(Error::contract("a model carries a single adapter spec"));
        }
        self.adapters = Some(AdapterSet::new(self.base.config, spec, seed)?);
        Ok(())
    }

    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor<f32>)> {
        self.adapters.as_ref().map(|a| a.named_tensors()).unwrap_or_default()
    }

    /// Effective weights for evaluation.
    pub fn merge_preview(&self) -> Result<Weights<f32>> {
        if self.training {
            return Err(Error::contract("merge_preview requires evaluation mode"));
        }
        Ok(match &self.adapters {
            Some(a) => a.merge_into(&self.base),
            None => (*self.base).clone(),
        })
    }

    /// Evaluation-mode forward through base weights and adapter branches.
    pub fn forward(&self, tokens: &[usize], taps: &[usize], injection: Option<Injection<'_>>) -> Result<ForwardOutput> {
        forward(&self.base, self.adapters.as_ref(), tokens, taps, injection)
    }
}

/// Attaches `spec` to a fresh copy of `weights`.
pub fn attach(weights: Arc<Weights<f32>>, spec: AdapterSpec, seed: u64) -> Result<AdaptedModel> {
    let mut m = AdaptedModel::plain(weights);
    m.attach(spec, seed)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn base() -> Arc<Weights<f32>> {
        Arc::new(init_weights(ModelConfig::desk(60), 3).unwrap())
    }

    #[test]
    fn fresh_adapters_are_transparent() {
        let w = base();
        let m = attach(w.clone(), AdapterSpec::standard(0..4), 11).unwrap();
        let tokens = [3, 7, 1, 9, 22];
        let plain = forward(&w, None, &tokens, &[], None).unwrap();
        let adapted = m.forward(&tokens, &[], None).unwrap();
        assert!(plain.logits.max_abs_diff(&adapted.logits) <= 1e-6);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let w = base();
        let spec = AdapterSpec::standard(0..4);
        let m = attach(w.clone(), spec.clone(), 0).unwrap();
        let counted: usize = m.trainable_parameters().iter().map(|(_, t)| t.numel()).sum();
        let closed: usize = (0..4)
            .flat_map(|_| Site::ALL)
            .map(|s| {
                let (i, o) = s.dims(&w.config);
                spec.rank * (i + o)
            })
            .sum();
        assert_eq!(counted, closed);
        // 4 layers × (4·(64+64) + 2·(64+256) + (256+64)) · 16
        assert_eq!(closed, 4 * 16 * (4 * 128 + 3 * 320));
        assert_eq!(m.trainable_parameters().len(), 56);
    }

    #[test]
    fn no_adapters_means_no_trainable_parameters() {
        let m = AdaptedModel::plain(base());
        assert!(m.trainable_parameters().is_empty());
        assert_eq!(m.merge_preview().unwrap(), *m.base);
    }

    #[test]
    fn duplicate_attach_is_rejected() {
        let mut m = attach(base(), AdapterSpec::standard([1]), 0).unwrap();
        let err = m.attach(AdapterSpec::standard([1, 2]), 1).unwrap_err().to_string();
        assert!(err.contains("already attached"), "{err}");
    }

    #[test]
    fn spec_validation() {
        let cfg = ModelConfig::desk(60);
        let mut spec = AdapterSpec::standard([0]);
        spec.rank = 0;
        assert!(spec.validate(&cfg).is_err());
        let mut spec = AdapterSpec::standard([8]);
        assert!(spec.validate(&cfg).is_err());
        spec.target_layers = vec![7];
        spec.dropout_p = 1.0;
        assert!(spec.validate(&cfg).is_err());
    }

    #[test]
    fn eval_mode_forwards_are_bit_identical() {
        let mut m = attach(base(), AdapterSpec::standard(0..2), 5).unwrap();
        for t in m.adapters.as_mut().unwrap().tensors_mut() {
            let n = t.numel();
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += 0.01 * ((i % 7) as f32 - 3.0) / n as f32);
        }
        let a = m.forward(&[1, 2, 3], &[], None).unwrap();
        let b = m.forward(&[1, 2, 3], &[], None).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn alpha_scales_the_delta_linearly() {
        let w = base();
        let mut set = AdapterSet::new(w.config, AdapterSpec::standard([0]), 2).unwrap();
        for ad in set.entries.values_mut() {
            ad.b = Tensor::from_fn(ad.b.shape(), |i| ((i % 5) as f32 - 2.0) * 0.01);
        }
        let m1 = set.merge_into(&w);
        set.spec.alpha *= 2.0;
        let m2 = set.merge_into(&w);
        let base_q = w.layers[0].site(Site::Q).data();
        let d1: Vec<f32> = m1.layers[0]
            .site(Site::Q)
            .data()
            .iter()
            .zip(base_q)
            .map(|(a, b)| a - b)
            .collect();
        let d2: Vec<f32> = m2.layers[0]
            .site(Site::Q)
            .data()
            .iter()
            .zip(base_q)
            .map(|(a, b)| a - b)
            .collect();
        for (a, b) in d1.iter().zip(&d2) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }
}
