// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing: capture encoder activations at a layer, inject them into
//! the decoder over a placeholder span, and score closed-form answers.
//!
//! Decoder input layout is `[<ph> × dialogue_len] ++ question`; the payload
//! replaces the placeholder rows after block `ℓ` of the decoder, the same
//! index it was captured at.

mod probe;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::autodiff::{log_softmax_at, Tape, Tensor};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, Session, Weights};
use crate::taskgen::{make_queries, DialogueSample, StateKind, PLACEHOLDER};

pub use probe::{null_features, train_linear_probe, v_usable_info, LinearProbe, ProbeConfig, ProbeFit, VInfo};
pub use report::{chance_level, CellKey, CsvRow, SampleRecord, TraceCell, TraceReport};

/// A question with a closed candidate set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuery {
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gold: usize,
    pub kind: StateKind,
    pub agent: u8,
}

impl ProbeQuery {
    pub fn new(
        question: Vec<usize>,
        candidates: Vec<Vec<usize>>,
        gold: usize,
        kind: StateKind,
        agent: u8,
    ) -> Result<Self> {
        if question.is_empty() {
            return Err(Error::contract("probe question is empty"));
        }
        if candidates.is_empty() || candidates.iter().any(Vec::is_empty) {
            return Err(Error::contract("probe candidates must be nonempty token sequences"));
        }
        for i in 0..candidates.len() {
            if candidates[i + 1..].contains(&candidates[i]) {
                return Err(Error::contract(format!("probe candidate {i} is duplicated")));
            }
        }
        if gold >= candidates.len() {
            return Err(Error::OutOfRange {
                what: "gold index",
                index: gold,
                limit: candidates.len(),
            });
        }
        Ok(Self {
            question,
            candidates,
            gold,
            kind,
            agent,
        })
    }
}

/// Residual stream of the encoder after block `layer`, one row per dialogue
/// token.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPayload {
    pub layer: usize,
    pub grid: Tensor<f32>,
    /// Hash of (encoder digest, input tokens, layer).
    pub source: Digest,
}

impl ActivationPayload {
    pub fn positions(&self) -> usize {
        self.grid.rows()
    }

    /// Mean over positions.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let (n, d) = (self.grid.rows(), self.grid.cols());
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(self.grid.row(r)) {
                *o += v as f64;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        out
    }
}

/// Encoder weights with optional adapters, in evaluation mode.
#[derive(Clone, Debug)]
pub struct Encoder<'a> {
    pub weights: &'a Weights<f32>,
    pub adapters: Option<&'a AdapterSet<f32>>,
    digest: Digest,
}

impl<'a> Encoder<'a> {
    pub fn new(weights: &'a Weights<f32>, adapters: Option<&'a AdapterSet<f32>>) -> Self {
        let mut h = Hasher::new();
        h.str(weights.digest().as_str());
        if let Some(a) = adapters {
            h.str(a.digest().as_str());
        }
        Self {
            weights,
            adapters,
            digest: h.finish(),
        }
    }

    pub fn digest(&self) -> &Digest {
        &self.digest
    }

    /// Payloads at each of `layers` from one forward pass.
    pub fn capture_layers(&self, tokens: &[usize], layers: &[usize]) -> Result<Vec<ActivationPayload>> {
        let cfg = self.weights.config;
        if tokens.is_empty() {
            return Err(Error::contract("cannot capture activations of an empty dialogue"));
        }
        if tokens.len() > cfg.max_seq {
            return Err(Error::contract(format!(
                "dialogue of {} tokens exceeds max_seq {}",
                tokens.len(),
                cfg.max_seq
            )));
        }
        for &l in layers {
            cfg.check_layer(l)?;
        }
        let Some(&deepest) = layers.iter().max() else {
            return Ok(Vec::new());
        };
        let mut tape = Tape::new();
        let w = self.weights.bind(&mut tape, false);
        let ad = self.adapters.map(|a| a.bind(&mut tape, false));
        let out = forward_on_tape(&mut tape, &w, ad.as_ref(), tokens, layers, None, Some(deepest), None)?;
        layers
            .iter()
            .map(|&l| {
                let var = out.taps.iter().find(|(tl, _)| *tl == l).expect("tap requested").1;
                let grid = tape.value(var).clone();
                if !grid.is_finite() {
                    return Err(Error::contract(format!("non-finite activations at layer {l}")));
                }
                let mut h = Hasher::new();
                h.str(self.digest.as_str()).usizes(tokens).usizes(&[l]);
                Ok(ActivationPayload {
                    layer: l,
                    grid,
                    source: h.finish(),
                })
            })
            .collect()
    }

    pub fn capture(&self, tokens: &[usize], layer: usize) -> Result<ActivationPayload> {
        Ok(self.capture_layers(tokens, &[layer])?.remove(0))
    }
}

/// Captures the encoder residual stream after block `layer`.
pub fn capture(
    weights: &Weights<f32>,
    adapters: Option<&AdapterSet<f32>>,
    tokens: &[usize],
    layer: usize,
) -> Result<ActivationPayload> {
    Encoder::new(weights, adapters).capture(tokens, layer)
}

/// Candidates ranked by summed next-token log-likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub loglik: Vec<f64>,
    /// Candidate indices, best first; equal scores keep index order.
    pub ranking: Vec<usize>,
    pub prediction: usize,
    /// Another candidate scored exactly as high as the prediction.
    pub tied: bool,
}

/// Scores `query` given a session that has consumed the context.
fn score_after(mut session: Session<'_>, query: &ProbeQuery) -> Result<Scored> {
    let logits = session.extend(&query.question, None)?;
    let last = logits.row(logits.rows() - 1).to_vec();
    let mut loglik = Vec::with_capacity(query.candidates.len());
    for cand in &query.candidates {
        let mut ll = log_softmax_at(&last, cand[0]) as f64;
        if cand.len() > 1 {
            let mut fork = session.clone();
            let lg = fork.extend(&cand[..cand.len() - 1], None)?;
            for (i, &tok) in cand[1..].iter().enumerate() {
                ll += log_softmax_at(lg.row(i), tok) as f64;
            }
        }
        loglik.push(ll);
    }
    let mut ranking: Vec<usize> = (0..loglik.len()).collect();
    ranking.sort_by(|&a, &b| loglik[b].total_cmp(&loglik[a]));
    let prediction = ranking[0];
    let tied = ranking[1..].iter().any(|&i| loglik[i] == loglik[prediction]);
    Ok(Scored {
        loglik,
        ranking,
        prediction,
        tied,
    })
}

/// Answers `query` from the decoder with `payload` injected over a
/// placeholder span at the payload's layer.
pub fn patched_answer(decoder: &Weights<f32>, payload: &ActivationPayload, query: &ProbeQuery) -> Result<Scored> {
    let cfg = decoder.config;
    if payload.grid.cols() != cfg.d_model {
        return Err(Error::shape(
            "patched_answer",
            format!(
                "payload width {} but decoder d_model {}",
                payload.grid.cols(),
                cfg.d_model
            ),
        ));
    }
    cfg.check_layer(payload.layer)?;
    let mut session = Session::new(decoder);
    session.extend(
        &vec![PLACEHOLDER; payload.positions()],
        Some((payload.layer, &payload.grid)),
    )?;
    score_after(session, query)
}

/// Answers `query` from the decoder reading `context` tokens directly.
pub fn text_answer(decoder: &Weights<f32>, context: &[usize], query: &ProbeQuery) -> Result<Scored> {
    let mut session = Session::new(decoder);
    if !context.is_empty() {
        session.extend(context, None)?;
    }
    score_after(session, query)
}

/// Layer sweep over `samples` at each sample's truncation stage, plus the
/// unpatched text-input row (`layer = None`).
pub fn causal_trace_sweep(
    encoder: &Encoder<'_>,
    decoder: &Weights<f32>,
    samples: &[DialogueSample],
    layers: &[usize],
) -> Result<TraceReport> {
    if samples.is_empty() {
        return Err(Error::contract("trace sweep over an empty dataset"));
    }
    if layers.is_empty() {
        return Err(Error::contract("trace sweep needs at least one layer"));
    }
    let per_sample: Vec<Result<Vec<SampleRecord>>> = samples
        .par_iter()
        .map(|s| {
            let tokens = s.stage_tokens();
            let queries = make_queries(s, s.stage)?;
            let payloads = encoder.capture_layers(&tokens, layers)?;
            let mut records = Vec::with_capacity(queries.len() * (layers.len() + 1));
            let mut push = |layer: Option<usize>, q: &ProbeQuery, sc: Scored| {
                records.push(SampleRecord {
                    sample_id: s.id,
                    layer,
                    kind: q.kind,
                    agent: q.agent,
                    correct: sc.prediction == q.gold,
                    tied: sc.tied,
                });
            };
            for q in &queries {
                push(None, q, text_answer(decoder, &tokens, q)?);
            }
            for p in &payloads {
                for q in &queries {
                    push(Some(p.layer), q, patched_answer(decoder, p, q)?);
                }
            }
            Ok(records)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_sample {
        records.extend(r?);
    }
    Ok(TraceReport::from_records(layers, samples[0].scenario, records))
}
