// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Tensor};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Site};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    /// Indexed by [`Site::index`].
    pub proj: [Tensor<T>; 7],
}

impl<T: Real> LayerWeights<T> {
    pub fn site(&self, site: Site) -> &Tensor<T> {
        &self.proj[site.index()]
    }

    pub fn site_mut(&mut self, site: Site) -> &mut Tensor<T> {
        &mut self.proj[site.index()]
    }
}

/// Dense parameters of the transformer. The unembedding is tied to
/// `tok_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
}

impl<T: Real> Weights<T> {
    /// Parameter names in manifest order.
    pub fn names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["tok_emb".to_owned(), "pos_emb".to_owned()];
        for l in 0..config.n_layers {
            names.push(format!("layers.{l}.attn_norm"));
            names.push(format!("layers.{l}.ffn_norm"));
            for site in Site::ALL {
                names.push(format!("layers.{l}.{site}"));
            }
        }
        names.push("final_norm".to_owned());
        names
    }

    /// Expected shape of every parameter, in manifest order.
    pub fn shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let d = config.d_model;
        let mut shapes = vec![vec![config.vocab_size, d], vec![config.max_seq, d]];
        for _ in 0..config.n_layers {
            shapes.push(vec![d]);
            shapes.push(vec![d]);
            for site in Site::ALL {
                let (i, o) = site.dims(config);
                shapes.push(vec![i, o]);
            }
        }
        shapes.push(vec![d]);
        shapes
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.push(&layer.attn_norm);
            out.push(&layer.ffn_norm);
            out.extend(layer.proj.iter());
        }
        out.push(&self.final_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.ffn_norm);
            out.extend(layer.proj.iter_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    /// Rebuilds weights from tensors in manifest order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(Self::names(&config)) {
            if t.shape() != s.as_slice() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {s:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let tok_emb = next();
        let pos_emb = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_norm = next();
            let ffn_norm = next();
            let proj = [next(), next(), next(), next(), next(), next(), next()];
            layers.push(LayerWeights {
                attn_norm,
                ffn_norm,
                proj,
            });
        }
        let final_norm = next();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
        })
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let tensors = self.tensors().into_iter().map(|t| t.cast::<U>()).collect();
        Weights::from_tensors(self.config, tensors).expect("same layout")
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

impl Weights<f32> {
    /// Stable content digest over names, shapes and little-endian values.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.str("weights").usizes(&[
            self.config.n_layers,
            self.config.d_model,
            self.config.n_heads,
            self.config.d_ff,
            self.config.vocab_size,
            self.config.max_seq,
        ]);
        for (name, t) in Self::names(&self.config).iter().zip(self.tensors()) {
            h.tensor(name, t);
        }
        h.finish()
    }
}

/// Scaled-normal initialisation (std 0.02, residual-output projections
/// shrunk by `1/√(2·n_layers)`), unit normalisation gains.
pub fn init_weights(config: ModelConfig, seed: u64) -> Result<Weights<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize], std: f64| -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut rng) as f32)
    };
    let d = config.d_model;
    let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let tok_emb = normal(&[config.vocab_size, d], INIT_STD);
    let pos_emb = normal(&[config.max_seq, d], INIT_STD);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let proj = Site::ALL.map(|site| {
            let (i, o) = site.dims(&config);
            let std = if site.is_residual_output() {
                residual_std
            } else {
                INIT_STD
            };
            normal(&[i, o], std)
        });
        layers.push(LayerWeights {
            attn_norm: Tensor::filled(&[d], 1.0),
            ffn_norm: Tensor::filled(&[d], 1.0),
            proj,
        });
    }
    Ok(Weights {
        config,
        tok_emb,
        pos_emb,
        layers,
        final_norm: Tensor::filled(&[d], 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::desk(120)
    }

    #[test]
    fn same_seed_same_digest() {
        let a = init_weights(cfg(), 42).unwrap();
        let b = init_weights(cfg(), 42).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn different_seed_different_digest() {
        let a = init_weights(cfg(), 42).unwrap();
        let b = init_weights(cfg(), 43).unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn embedding_sample_statistics() {
        // Sample-statistics oracle over a d_model = 32 embedding with ≥ 10⁴ entries.
        let config = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 400,
            max_seq: 16,
        };
        let w = init_weights(config, 42).unwrap();
        let vals = w.tok_emb.data();
        assert!(vals.len() >= 10_000);
        let n = vals.len() as f64;
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn residual_projections_are_scaled_down() {
        let w = init_weights(cfg(), 1).unwrap();
        let std = |t: &Tensor<f32>| {
            let n = t.numel() as f64;
            (t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n).sqrt()
        };
        let q = std(w.layers[0].site(Site::Q));
        let o = std(w.layers[0].site(Site::O));
        assert!((q / o - 4.0).abs() < 0.3, "ratio {}", q / o);
    }

    #[test]
    fn shapes_follow_config() {
        let w = init_weights(cfg(), 0).unwrap();
        for (t, s) in w.tensors().iter().zip(Weights::<f32>::shapes(&w.config)) {
            assert_eq!(t.shape(), s.as_slice());
        }
        let rebuilt = Weights::from_tensors(w.config, w.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(rebuilt.digest(), w.digest());
    }
}
