// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterSet;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Site, Weights};

/// Per-block parameter handles on a tape.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub ffn_norm: Var,
    pub proj: [Var; 7],
}

/// Model parameters placed on a tape as leaves.
#[derive(Clone, Debug)]
pub struct BoundWeights {
    pub config: ModelConfig,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
}

impl BoundWeights {
    /// Handles in manifest order (matches [`Weights::tensors`]).
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.push(l.attn_norm);
            out.push(l.ffn_norm);
            out.extend(l.proj);
        }
        out.push(self.final_norm);
        out
    }
}

impl<T: Real> Weights<T> {
    /// Places every parameter on `tape`. Frozen weights (`trainable = false`)
    /// never receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundWeights {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), trainable);
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                attn_norm: leaf(&l.attn_norm),
                ffn_norm: leaf(&l.ffn_norm),
                proj: [
                    leaf(&l.proj[0]),
                    leaf(&l.proj[1]),
                    leaf(&l.proj[2]),
                    leaf(&l.proj[3]),
                    leaf(&l.proj[4]),
                    leaf(&l.proj[5]),
                    leaf(&l.proj[6]),
                ],
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        BoundWeights {
            config: self.config,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
        }
    }
}

/// Adapter handles on a tape, keyed by (layer, site).
#[derive(Clone, Debug)]
pub struct BoundAdapters<T> {
    pub scale: T,
    pub dropout_p: f64,
    pub entries: BTreeMap<(usize, Site), (Var, Var)>,
}

/// Replace the residual stream after block `layer` at rows
/// `start..start + rows(payload)` with `payload`.
#[derive(Clone, Copy, Debug)]
pub struct TapeInjection {
    pub layer: usize,
    pub start: usize,
    pub payload: Var,
}

/// Injection described by value, for the convenience entry points.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a, T = f32> {
    pub layer: usize,
    pub start: usize,
    pub payload: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T = f32> {
    /// `len × vocab`.
    pub logits: Tensor<T>,
    /// Residual stream after each requested block, `len × d_model`.
    pub taps: BTreeMap<usize, Tensor<T>>,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::contract("token sequence is empty"));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::contract(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some((pos, &id)) = tokens.iter().enumerate().find(|(_, &id)| id >= cfg.vocab_size) {
        return Err(Error::contract(format!(
            "token id {id} at position {pos} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn check_injection(
    cfg: &ModelConfig,
    seq_len: usize,
    layer: usize,
    start: usize,
    payload_shape: &[usize],
) -> Result<()> {
    cfg.check_layer(layer)?;
    match payload_shape {
        [rows, cols] if *cols == cfg.d_model && *rows >= 1 => {
            if start + rows > seq_len {
                return Err(Error::shape(
                    "injection",
                    format!("rows {start}..{} exceed sequence length {seq_len}", start + rows),
                ));
            }
            Ok(())
        }
        other => Err(Error::shape(
            "injection",
            format!("payload {other:?} does not match (positions, {})", cfg.d_model),
        )),
    }
}

/// Token plus positional embedding for positions `offset..offset + len`.
pub(crate) fn embed<T: Real>(tape: &mut Tape<T>, w: &BoundWeights, tokens: &[usize]) -> Result<Var> {
    let tok = tape.embedding(w.tok_emb, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.embedding(w.pos_emb, &positions)?;
    tape.add(tok, pos)
}

fn linear<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    adapter: Option<(Var, Var)>,
    scale: T,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    let Some((a, b)) = adapter else { return Ok(y) };
    let input = match dropout {
        Some((rng, p)) if p > 0.0 => {
            let shape = tape.value(x).shape().to_vec();
            let keep = T::from_f64_lossy(1.0 / (1.0 - p));
            let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < p { T::zero() } else { keep });
            let m = tape.constant(mask);
            tape.mul(x, m)?
        }
        _ => x,
    };
    let down = tape.matmul(input, a)?;
    let up = tape.matmul(down, b)?;
    let delta = tape.scale(up, scale)?;
    tape.add(y, delta)
}

/// Runs blocks `layers` on residual `x`, applying an injection and recording
/// taps after each block. Taps are taken after the injection is applied.
#[allow(clippy::too_many_arguments)]
pub fn run_blocks<T: Real>(
    tape: &mut Tape<T>,
    w: &BoundWeights,
    adapters: Option<&BoundAdapters<T>>,
    mut x: Var,
    layers: Range<usize>,
    injection: Option<&TapeInjection>,
    taps: &[usize],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<(usize, Var)>)> {
    let cfg = w.config;
    let seq = tape.value(x).rows();
    let dh = cfg.head_dim();
    let inv_sqrt = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut captured = Vec::new();
    for l in layers {
        let lw = &w.layers[l];
        let proj = |tape: &mut Tape<T>, x: Var, site: Site, rng: Option<&mut ChaCha8Rng>| {
            let (adapter, scale, p) = match adapters {
                Some(ad) => (ad.entries.get(&(l, site)).copied(), ad.scale, ad.dropout_p),
                None => (None, T::one(), 0.0),
            };
            linear(tape, x, lw.proj[site.index()], adapter, scale, rng.map(|r| (r, p)))
        };

        let h = tape.rms_norm(x, lw.attn_norm)?;
        let q = proj(tape, h, Site::Q, dropout_rng.as_deref_mut())?;
        let k = proj(tape, h, Site::K, dropout_rng.as_deref_mut())?;
        let v = proj(tape, h, Site::V, dropout_rng.as_deref_mut())?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let masked = tape.causal_mask(scores)?;
            let attn = tape.softmax(masked)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn_out = proj(tape, merged, Site::O, dropout_rng.as_deref_mut())?;
        x = tape.add(x, attn_out)?;

        let h2 = tape.rms_norm(x, lw.ffn_norm)?;
        let gate = proj(tape, h2, Site::Gate, dropout_rng.as_deref_mut())?;
        let gate = tape.silu(gate)?;
        let up = proj(tape, h2, Site::Up, dropout_rng.as_deref_mut())?;
        let hidden = tape.mul(gate, up)?;
        let ffn_out = proj(tape, hidden, Site::Down, dropout_rng.as_deref_mut())?;
        x = tape.add(x, ffn_out)?;

        if let Some(inj) = injection.filter(|inj| inj.layer == l) {
            let rows = tape.value(inj.payload).rows();
            let end = inj.start + rows;
            let mut parts = Vec::with_capacity(3);
            if inj.start > 0 {
                parts.push(tape.slice_rows(x, 0, inj.start)?);
            }
            parts.push(inj.payload);
            if end < seq {
                parts.push(tape.slice_rows(x, end, seq)?);
            }
            x = if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat_rows(&parts)?
            };
        }
        if taps.contains(&l) {
            captured.push((l, x));
        }
    }
    Ok((x, captured))
}

/// Final normalisation and tied unembedding.
pub(crate) fn head<T: Real>(tape: &mut Tape<T>, w: &BoundWeights, x: Var) -> Result<Var> {
    let h = tape.rms_norm(x, w.final_norm)?;
    tape.matmul_nt(h, w.tok_emb)
}

/// Output of [`forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeOutput {
    /// Absent when the pass stopped early.
    pub logits: Option<Var>,
    pub taps: Vec<(usize, Var)>,
}

/// Full forward pass recorded on `tape`.
///
/// `stop_after = Some(ℓ)` computes blocks `0..=ℓ` only and skips the head;
/// this is enough for activation capture. `dropout_rng` switches adapters into
/// training mode.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    w: &BoundWeights,
    adapters: Option<&BoundAdapters<T>>,
    tokens: &[usize],
    taps: &[usize],
    injection: Option<&TapeInjection>,
    stop_after: Option<usize>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeOutput> {
    let cfg = w.config;
    check_tokens(&cfg, tokens)?;
    for &t in taps {
        cfg.check_layer(t)?;
    }
    if let Some(inj) = injection {
        let shape = tape.value(inj.payload).shape().to_vec();
        check_injection(&cfg, tokens.len(), inj.layer, inj.start, &shape)?;
    }
    let last = match stop_after {
        Some(l) => {
            cfg.check_layer(l)?;
            l + 1
        }
        None => cfg.n_layers,
    };
    let x = embed(tape, w, tokens)?;
    let (x, captured) = run_blocks(tape, w, adapters, x, 0..last, injection, taps, dropout_rng)?;
    let logits = if stop_after.is_none() {
        Some(head(tape, w, x)?)
    } else {
        None
    };
    Ok(TapeOutput { logits, taps: captured })
}

/// Evaluation-mode forward pass (no dropout, no gradients).
pub fn forward<T: Real>(
    weights: &Weights<T>,
    adapters: Option<&AdapterSet<T>>,
    tokens: &[usize],
    taps: &[usize],
    injection: Option<Injection<'_, T>>,
) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape, false);
    let bound = adapters.map(|a| a.bind(&mut tape, false));
    let inj = injection.map(|inj| TapeInjection {
        layer: inj.layer,
        start: inj.start,
        payload: tape.constant(inj.payload.clone()),
    });
    let out = forward_on_tape(&mut tape, &w, bound.as_ref(), tokens, taps, inj.as_ref(), None, None)?;
    let logits = tape.value(out.logits.expect("full pass")).clone();
    let taps = out.taps.into_iter().map(|(l, v)| (l, tape.value(v).clone())).collect();
    Ok(ForwardOutput { logits, taps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn small() -> Weights<f32> {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 20,
            max_seq: 12,
        };
        init_weights(cfg, 7).unwrap()
    }

    #[test]
    fn shapes_of_logits_and_taps() {
        let w = small();
        let out = forward(&w, None, &[1, 2, 3, 4], &[0, 2], None).unwrap();
        assert_eq!(out.logits.shape(), &[4, 20]);
        assert_eq!(out.taps[&0].shape(), &[4, 16]);
        assert_eq!(out.taps[&2].shape(), &[4, 16]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = small();
        assert!(forward(&w, None, &[], &[], None).is_err());
        assert!(forward(&w, None, &[25], &[], None).is_err());
        assert!(forward(&w, None, &[1; 13], &[], None).is_err());
        assert!(forward(&w, None, &[1, 2], &[3], None).is_err());
        let payload = Tensor::<f32>::zeros(&[2, 15]);
        let inj = Injection {
            layer: 0,
            start: 0,
            payload: &payload,
        };
        assert!(forward(&w, None, &[1, 2], &[], Some(inj)).is_err());
        let payload = Tensor::<f32>::zeros(&[2, 16]);
        let inj = Injection {
            layer: 3,
            start: 0,
            payload: &payload,
        };
        assert!(forward(&w, None, &[1, 2], &[], Some(inj)).is_err());
        let inj = Injection {
            layer: 1,
            start: 1,
            payload: &payload,
        };
        assert!(forward(&w, None, &[1, 2], &[], Some(inj)).is_err());
    }

    #[test]
    fn tap_sees_the_payload() {
        let w = small();
        let payload = Tensor::<f32>::filled(&[2, 16], 0.25);
        let inj = Injection {
            layer: 1,
            start: 1,
            payload: &payload,
        };
        let out = forward(&w, None, &[1, 2, 3, 4], &[1], Some(inj)).unwrap();
        let tap = &out.taps[&1];
        assert_eq!(tap.slice_rows(1, 3).unwrap().data(), payload.data());
    }
}
