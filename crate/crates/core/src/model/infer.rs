// SPDX-License-Identifier: MIT OR Apache-2.0

//! Incremental inference with a per-layer key/value cache.
//!
//! Used for candidate scoring and generation, where the tape would recompute
//! the whole prefix for every appended token. Arithmetic mirrors the tape's
//! forward pass; results agree with [`crate::model::forward`] up to
//! summation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_row, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::forward::{check_injection, check_tokens};
use crate::model::{Injection, Site, Weights};

const RMS_EPS: f32 = 1e-5;

/// Decoder state after consuming a prefix. Cloning forks the prefix.
#[derive(Clone)]
pub struct Session<'w> {
    w: &'w Weights<f32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

fn rms_norm(x: &[f32], gain: &[f32], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v * inv * g));
    }
    out
}

fn matmul(x: &[f32], rows: usize, w: &Tensor<f32>) -> Vec<f32> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    f32::gemm(rows, k, n, 1.0, x, (k, 1), w.data(), (n, 1), 0.0, &mut out, (n, 1));
    out
}

impl<'w> Session<'w> {
    pub fn new(w: &'w Weights<f32>) -> Self {
        let n = w.config.n_layers;
        Self {
            w,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Number of positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens` and returns their logits (`tokens.len() × vocab`).
    ///
    /// With `injection = Some((ℓ, payload))` the residual stream of exactly
    /// these new positions is replaced by `payload` after block `ℓ`.
    pub fn extend(&mut self, tokens: &[usize], injection: Option<(usize, &Tensor<f32>)>) -> Result<Tensor<f32>> {
        let cfg = self.w.config;
        let n = tokens.len();
        let p0 = self.len;
        if n == 0 {
            return Err(Error::contract("extend with no tokens"));
        }
        check_tokens(&cfg, tokens)?;
        if p0 + n > cfg.max_seq {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_seq {}",
                p0 + n,
                cfg.max_seq
            )));
        }
        if let Some((layer, payload)) = injection {
            check_injection(&cfg, n, layer, 0, payload.shape())?;
            if payload.rows() != n {
                return Err(Error::shape(
                    "injection",
                    format!("payload covers {} rows, chunk has {n}", payload.rows()),
                ));
            }
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let w = self.w;

        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            x.extend(w.tok_emb.row(t).iter().zip(w.pos_emb.row(p0 + i)).map(|(a, b)| a + b));
        }

        for (l, lw) in w.layers.iter().enumerate() {
            let h = rms_norm(&x, lw.attn_norm.data(), d);
            let q = matmul(&h, n, lw.site(Site::Q));
            self.keys[l].extend(matmul(&h, n, lw.site(Site::K)));
            self.values[l].extend(matmul(&h, n, lw.site(Site::V)));
            let (keys, vals) = (&self.keys[l], &self.values[l]);
            let mut attn = vec![0.0f32; n * d];
            let mut scores = Vec::with_capacity(p0 + n);
            for i in 0..n {
                let visible = p0 + i + 1;
                for hd in 0..cfg.n_heads {
                    let off = hd * dh;
                    let qi = &q[i * d + off..i * d + off + dh];
                    scores.clear();
                    scores.extend((0..visible).map(|j| {
                        let kj = &keys[j * d + off..j * d + off + dh];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale
                    }));
                    let probs = softmax_row(&scores);
                    let out = &mut attn[i * d + off..i * d + off + dh];
                    for (j, p) in probs.iter().enumerate() {
                        let vj = &vals[j * d + off..j * d + off + dh];
                        for (o, v) in out.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
            let o = matmul(&attn, n, lw.site(Site::O));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let h2 = rms_norm(&x, lw.ffn_norm.data(), d);
            let mut gate = matmul(&h2, n, lw.site(Site::Gate));
            let up = matmul(&h2, n, lw.site(Site::Up));
            gate.iter_mut()
                .zip(&up)
                .for_each(|(g, u)| *g = crate::autodiff::silu_scalar(*g) * u);
            let down = matmul(&gate, n, lw.site(Site::Down));
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);

            if let Some((layer, payload)) = injection {
                if layer == l {
                    x.copy_from_slice(payload.data());
                }
            }
        }
        self.len += n;

        let h = rms_norm(&x, w.final_norm.data(), d);
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; n * vocab];
        f32::gemm(
            n,
            d,
            vocab,
            1.0,
            &h,
            (d, 1),
            w.tok_emb.data(),
            (1, d),
            0.0,
            &mut logits,
            (vocab, 1),
        );
        Tensor::matrix(n, vocab, logits)
    }
}

/// Decoding rule for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature { tau: f32, seed: u64 },
}

fn argmax(row: &[f32]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive continuation of `prompt`.
///
/// The injection (if any) covers fixed prompt positions. Because the cache
/// keeps the patched prefix, every step sees the payload exactly as a full
/// re-run with the same injection would. Generation stops after `max_new`
/// tokens, at `stop` (included), or at `max_seq`.
pub fn generate(
    weights: &Weights<f32>,
    prompt: &[usize],
    max_new: usize,
    decoding: Decoding,
    injection: Option<Injection<'_>>,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::contract("generation prompt is empty"));
    }
    if let Some(inj) = injection {
        check_injection(&weights.config, prompt.len(), inj.layer, inj.start, inj.payload.shape())?;
    }
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let mut session = Session::new(weights);
    let logits = match injection {
        None => session.extend(prompt, None)?,
        Some(inj) => {
            let end = inj.start + inj.payload.rows();
            if inj.start > 0 {
                session.extend(&prompt[..inj.start], None)?;
            }
            let mut last = session.extend(&prompt[inj.start..end], Some((inj.layer, inj.payload)))?;
            if end < prompt.len() {
                last = session.extend(&prompt[end..], None)?;
            }
            last
        }
    };
    let mut row = logits.row(logits.rows() - 1).to_vec();
    let mut rng = match decoding {
        Decoding::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new && session.len() < weights.config.max_seq {
        let next = match (decoding, rng.as_mut()) {
            (Decoding::Temperature { tau, .. }, Some(rng)) if tau > 0.0 => {
                let scaled: Vec<f32> = row.iter().map(|v| v / tau).collect();
                let probs = softmax_row(&scaled);
                let u: f32 = rng.gen();
                let mut acc = 0.0;
                probs
                    .iter()
                    .position(|p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(probs.len() - 1)
            }
            _ => argmax(&row),
        };
        out.push(next);
        if Some(next) == stop || out.len() == max_new || session.len() >= weights.config.max_seq {
            break;
        }
        row = session.extend(&[next], None)?.row(0).to_vec();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_weights, ModelConfig};

    fn weights() -> Weights<f32> {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 30,
            max_seq: 40,
        };
        let mut w = init_weights(cfg, 9).unwrap();
        // larger weights so that logits are far from uniform
        for t in w.tensors_mut() {
            if t.shape().len() == 2 {
                for v in t.data_mut() {
                    *v *= 20.0;
                }
            }
        }
        w
    }

    #[test]
    fn incremental_matches_full_forward() {
        let w = weights();
        let tokens = [1, 5, 7, 2, 9, 11, 3];
        let full = forward(&w, None, &tokens, &[], None).unwrap();
        let mut s = Session::new(&w);
        let a = s.extend(&tokens[..4], None).unwrap();
        let b = s.extend(&tokens[4..], None).unwrap();
        let joined = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert!(
            full.logits.max_abs_diff(&joined) < 1e-4,
            "{}",
            full.logits.max_abs_diff(&joined)
        );
    }

    #[test]
    fn incremental_injection_matches_full_forward() {
        let w = weights();
        let tokens = [1, 5, 7, 2, 9, 11, 3];
        let payload = Tensor::from_fn(&[3, 16], |i| ((i as f32) * 0.37).sin());
        let inj = Injection {
            layer: 1,
            start: 2,
            payload: &payload,
        };
        let full = forward(&w, None, &tokens, &[], Some(inj)).unwrap();
        let mut s = Session::new(&w);
        let a = s.extend(&tokens[..2], None).unwrap();
        let b = s.extend(&tokens[2..5], Some((1, &payload))).unwrap();
        let c = s.extend(&tokens[5..], None).unwrap();
        let joined = Tensor::concat_rows(&[&a, &b, &c]).unwrap();
        assert!(full.logits.max_abs_diff(&joined) < 1e-4);
    }

    #[test]
    fn greedy_matches_naive_rerun() {
        let w = weights();
        let prompt = [4, 8, 15, 16];
        let payload = Tensor::from_fn(&[2, 16], |i| ((i as f32) * 0.11).cos());
        let inj = Injection {
            layer: 0,
            start: 1,
            payload: &payload,
        };
        let fast = generate(&w, &prompt, 6, Decoding::Greedy, Some(inj), None).unwrap();
        let mut seq = prompt.to_vec();
        for _ in 0..6 {
            let out = forward(&w, None, &seq, &[], Some(inj)).unwrap();
            seq.push(argmax(out.logits.row(seq.len() - 1)));
        }
        assert_eq!(fast, seq[prompt.len()..]);
    }

    #[test]
    fn decoding_is_deterministic() {
        let w = weights();
        let g1 = generate(&w, &[1, 2], 8, Decoding::Greedy, None, None).unwrap();
        let g2 = generate(&w, &[1, 2], 8, Decoding::Greedy, None, None).unwrap();
        assert_eq!(g1, g2);
        let t = Decoding::Temperature { tau: 1.5, seed: 4 };
        let s1 = generate(&w, &[1, 2], 8, t, None, None).unwrap();
        let s2 = generate(&w, &[1, 2], 8, t, None, None).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 8);
    }

    #[test]
    fn zero_budget_returns_empty() {
        let w = weights();
        assert!(generate(&w, &[1], 0, Decoding::Greedy, None, None).unwrap().is_empty());
        assert!(generate(&w, &[], 3, Decoding::Greedy, None, None).is_err());
    }
}
