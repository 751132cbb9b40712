// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-bridge steering: a loss computed in the frozen decoder flows
//! back through the injected payload into adapters of encoder blocks
//! `0..=ℓ`.

mod stop;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, AdapterSpec};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::head;
use crate::model::{
    forward_on_tape, run_blocks, BoundAdapters, BoundWeights, ModelConfig, Site, TapeInjection, Weights,
};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::taskgen::{make_queries, DialogueSample, PLACEHOLDER};
use crate::tracing::{ProbeQuery, TraceReport};

pub use stop::{replay_stop, StopReason, StopRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerConfig {
    /// Patch layer ℓ.
    pub layer: usize,
    pub adapter: AdapterSpec,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub stop: StopRule,
    pub seed: u64,
}

impl SteerConfig {
    /// Standard adapters on blocks `0..=layer`, AdamW at peak lr 1e-4 with
    /// linear decay, batch 4, at most 10 epochs, patience 3, delta 0.01,
    /// floor 0.1, seed 42.
    pub fn standard(layer: usize) -> Self {
        Self {
            layer,
            adapter: AdapterSpec::standard(0..=layer),
            lr: 1e-4,
            batch: 4,
            weight_decay: 0.01,
            stop: StopRule::default(),
            seed: 42,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.check_layer(self.layer)
            .map_err(|_| Error::config(format!("patch layer {} outside [0, {})", self.layer, cfg.n_layers)))?;
        self.adapter.validate(cfg)?;
        if let Some(&l) = self.adapter.target_layers.iter().find(|&&l| l > self.layer) {
            return Err(Error::config(format!(
                "adapter layer {l} lies above patch layer {}; only layers 0..={} are trainable",
                self.layer, self.layer
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        self.stop.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub steps: usize,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation loss before the first update (epoch 0).
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch whose adapters are returned (lowest validation loss).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SteerOutcome {
    pub adapters: AdapterSet<f32>,
    pub history: TrainHistory,
}

/// Encoder forward through blocks `0..=layer` returning the live residual
/// after block `layer`.
pub fn capture_live<T: Real>(
    tape: &mut Tape<T>,
    encoder: &BoundWeights,
    adapters: Option<&BoundAdapters<T>>,
    tokens: &[usize],
    layer: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let out = forward_on_tape(
        tape,
        encoder,
        adapters,
        tokens,
        &[layer],
        None,
        Some(layer),
        dropout_rng,
    )?;
    Ok(out.taps[0].1)
}

fn decoder_tokens(n_placeholders: usize, query: &ProbeQuery) -> (Vec<usize>, usize) {
    let gold = &query.candidates[query.gold];
    let mut tokens = vec![PLACEHOLDER; n_placeholders];
    tokens.extend(&query.question);
    let first_target = tokens.len() - 1;
    tokens.extend(&gold[..gold.len() - 1]);
    (tokens, first_target)
}

/// Mean negative log-likelihood of the gold answer tokens, given decoder
/// residuals after block `layer`: `payload` rows followed by `suffix` rows.
fn answer_nll<T: Real>(
    tape: &mut Tape<T>,
    decoder: &BoundWeights,
    residual: Var,
    layer: usize,
    query: &ProbeQuery,
    n_placeholders: usize,
) -> Result<Var> {
    let cfg = decoder.config;
    let (tokens, first_target) = decoder_tokens(n_placeholders, query);
    let (x, _) = run_blocks(tape, decoder, None, residual, layer + 1..cfg.n_layers, None, &[], None)?;
    let logits = head(tape, decoder, x)?;
    let gold = &query.candidates[query.gold];
    let mut targets = vec![0usize; tokens.len()];
    let mut weights = vec![T::zero(); tokens.len()];
    for (i, &g) in gold.iter().enumerate() {
        targets[first_target + i] = g;
        weights[first_target + i] = T::one();
    }
    tape.cross_entropy(logits, &targets, &weights)
}

/// Decoder residual after block `layer` on the placeholder-plus-question
/// input, without the placeholder rows. Independent of the payload.
fn decoder_suffix<T: Real>(
    tape: &mut Tape<T>,
    decoder: &BoundWeights,
    layer: usize,
    query: &ProbeQuery,
    n_placeholders: usize,
) -> Result<Var> {
    let (tokens, _) = decoder_tokens(n_placeholders, query);
    let out = forward_on_tape(tape, decoder, None, &tokens, &[layer], None, Some(layer), None)?;
    tape.slice_rows(out.taps[0].1, n_placeholders, tokens.len())
}

fn check_frozen(tape: &Tape<impl Real>, decoder: &BoundWeights) -> Result<()> {
    if decoder.vars().into_iter().any(|v| tape.requires_grad(v)) {
        return Err(Error::contract("decoder parameters must be frozen"));
    }
    Ok(())
}

/// Negative mean log-likelihood of the gold candidate under the frozen
/// decoder with `payload` injected at `layer` over a placeholder span.
///
/// The payload must be live (its record requires gradients), otherwise the
/// bridge to the encoder would be severed.
pub fn tom_loss<T: Real>(
    tape: &mut Tape<T>,
    decoder: &BoundWeights,
    payload: Var,
    layer: usize,
    query: &ProbeQuery,
) -> Result<Var> {
    check_frozen(tape, decoder)?;
    if !tape.requires_grad(payload) {
        return Err(Error::contract(
            "payload is detached; the gradient bridge would be severed",
        ));
    }
    let cfg = decoder.config;
    cfg.check_layer(layer)?;
    let shape = tape.value(payload).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::shape(
            "tom_loss",
            format!("payload shape {shape:?}, decoder d_model {}", cfg.d_model),
        ));
    }
    let n = shape[0];
    let (tokens, _) = decoder_tokens(n, query);
    let inj = TapeInjection {
        layer,
        start: 0,
        payload,
    };
    let out = forward_on_tape(tape, decoder, None, &tokens, &[layer], Some(&inj), Some(layer), None)?;
    answer_nll(tape, decoder, out.taps[0].1, layer, query, n)
}

/// Suffix residuals keyed by (placeholder count, decoder tokens).
struct SuffixCache<'d> {
    decoder: &'d Weights<f32>,
    layer: usize,
    map: HashMap<(usize, Vec<usize>), Tensor<f32>>,
}

impl<'d> SuffixCache<'d> {
    fn new(decoder: &'d Weights<f32>, layer: usize) -> Self {
        Self {
            decoder,
            layer,
            map: HashMap::new(),
        }
    }

    fn get(&mut self, query: &ProbeQuery, n: usize) -> Result<Tensor<f32>> {
        let key = (n, decoder_tokens(0, query).0);
        if let Some(t) = self.map.get(&key) {
            return Ok(t.clone());
        }
        let mut tape = Tape::new();
        let dec = self.decoder.bind(&mut tape, false);
        let v = decoder_suffix(&mut tape, &dec, self.layer, query, n)?;
        let t = tape.value(v).clone();
        self.map.insert(key, t.clone());
        Ok(t)
    }
}

/// [`tom_loss`] with the payload-independent decoder prefix supplied from
/// the cache.
fn cached_loss(
    tape: &mut Tape<f32>,
    decoder: &BoundWeights,
    payload: Var,
    layer: usize,
    query: &ProbeQuery,
    cache: &mut SuffixCache<'_>,
) -> Result<Var> {
    let n = tape.value(payload).rows();
    let suffix = tape.constant(cache.get(query, n)?);
    let residual = tape.concat_rows(&[payload, suffix])?;
    answer_nll(tape, decoder, residual, layer, query, n)
}

/// Stage tokens and their queries, one entry per sample.
type Pairs = (Vec<Vec<usize>>, Vec<Vec<ProbeQuery>>);

fn pairs_of(samples: &[DialogueSample]) -> Result<Pairs> {
    let tokens = samples.iter().map(DialogueSample::stage_tokens).collect();
    let queries = samples
        .iter()
        .map(|s| make_queries(s, s.stage))
        .collect::<Result<Vec<_>>>()?;
    Ok((tokens, queries))
}

/// Mean bridge loss over every (sample, query) pair, evaluation mode.
fn mean_loss(
    encoder: &Weights<f32>,
    adapters: &AdapterSet<f32>,
    decoder: &Weights<f32>,
    layer: usize,
    tokens: &[Vec<usize>],
    queries: &[Vec<ProbeQuery>],
    cache: &mut SuffixCache<'_>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (toks, qs) in tokens.iter().zip(queries) {
        let mut tape = Tape::new();
        let enc = encoder.bind(&mut tape, false);
        let ad = adapters.bind(&mut tape, false);
        let dec = decoder.bind(&mut tape, false);
        let payload = capture_live(&mut tape, &enc, Some(&ad), toks, layer, None)?;
        for q in qs {
            let loss = cached_loss(&mut tape, &dec, payload, layer, q, cache)?;
            total += tape.value(loss).item() as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Trains encoder adapters through the frozen decoder.
///
/// Every epoch visits each training dialogue once, in a seeded shuffle, in
/// mini-batches of `cfg.batch` dialogues. A dialogue's loss is the mean over
/// its six (state kind, agent) queries, all read from one capture.
/// The encoder runs in training mode (adapter dropout); the decoder is
/// never updated. Returns the adapters of the epoch with the lowest
/// validation loss.
pub fn steer_train(
    encoder: &Weights<f32>,
    adapters: AdapterSet<f32>,
    decoder: &Weights<f32>,
    train: &[DialogueSample],
    val: &[DialogueSample],
    cfg: &SteerConfig,
) -> Result<SteerOutcome> {
    cfg.validate(&encoder.config)?;
    if encoder.config != decoder.config {
        return Err(Error::contract(
            "encoder and decoder must share one model configuration",
        ));
    }
    if adapters.spec != cfg.adapter || adapters.config != encoder.config {
        return Err(Error::contract("adapters were not built from the configured spec"));
    }
    if train.is_empty() {
        return Err(Error::contract("steering needs a nonempty training set"));
    }
    if val.is_empty() {
        return Err(Error::contract("steering needs a nonempty validation set"));
    }
    let layer = cfg.layer;
    let (train_tokens, train_queries) = pairs_of(train)?;
    let (val_tokens, val_queries) = pairs_of(val)?;
    let mut cache = SuffixCache::new(decoder, layer);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = order.len().div_ceil(cfg.batch);
    let schedule = LinearSchedule {
        peak: cfg.lr,
        warmup: 0,
        total: steps_per_epoch * cfg.stop.max_epochs,
    };
    let mut adapters = adapters;
    let numels: Vec<usize> = adapters.tensors_mut().iter().map(|t| t.numel()).collect();
    let decay = vec![true; numels.len()];
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &numels,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6472_6f70);

    let initial_val_loss = mean_loss(
        encoder,
        &adapters,
        decoder,
        layer,
        &val_tokens,
        &val_queries,
        &mut cache,
    )?;
    let mut epochs = Vec::new();
    let mut best = (0usize, initial_val_loss, adapters.clone());
    let mut step = 0usize;
    let stop_reason = loop {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut train_total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let enc = encoder.bind(&mut tape, false);
            let ad = adapters.bind(&mut tape, true);
            let dec = decoder.bind(&mut tape, false);
            let mut sum: Option<Var> = None;
            let mut terms = 0usize;
            for &i in batch {
                let payload = capture_live(
                    &mut tape,
                    &enc,
                    Some(&ad),
                    &train_tokens[i],
                    layer,
                    Some(&mut dropout_rng),
                )?;
                for q in &train_queries[i] {
                    let loss = cached_loss(&mut tape, &dec, payload, layer, q, &mut cache)?;
                    sum = Some(match sum {
                        None => loss,
                        Some(s) => tape.add(s, loss)?,
                    });
                    terms += 1;
                }
            }
            let mean = tape.scale(sum.expect("nonempty batch"), 1.0 / terms as f32)?;
            train_total += tape.value(mean).item() as f64;
            let mut grads = tape.backward(mean)?;
            let g: Vec<Tensor<f32>> = ad
                .entries
                .values()
                .zip(adapters.entries.values())
                .flat_map(|(&(va, vb), a)| {
                    [
                        grads.take(va).unwrap_or_else(|| Tensor::zeros(a.a.shape())),
                        grads.take(vb).unwrap_or_else(|| Tensor::zeros(a.b.shape())),
                    ]
                })
                .collect();
            let mut params = adapters.tensors_mut();
            opt.step(&mut params, &g, schedule.lr_at(step), &decay);
            step += 1;
        }
        let val_loss = mean_loss(
            encoder,
            &adapters,
            decoder,
            layer,
            &val_tokens,
            &val_queries,
            &mut cache,
        )?;
        let epoch = epochs.len() + 1;
        epochs.push(EpochRecord {
            epoch,
            train_loss: train_total / steps_per_epoch as f64,
            val_loss,
            steps: steps_per_epoch,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if val_loss < best.1 || best.0 == 0 {
            best = (epoch, val_loss, adapters.clone());
        }
        let losses: Vec<f64> = epochs.iter().map(|e: &EpochRecord| e.val_loss).collect();
        if let Some(reason) = cfg.stop.decide(&losses) {
            break reason;
        }
    };
    Ok(SteerOutcome {
        adapters: best.2,
        history: TrainHistory {
            initial_val_loss,
            epochs,
            stop_reason,
            best_epoch: best.0,
        },
    })
}

/// Squared gradient norms after one bridge backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeGradients {
    /// Per adapter site: (‖∂L/∂A‖², ‖∂L/∂B‖²).
    pub adapters: BTreeMap<(usize, Site), (f64, f64)>,
    /// Largest squared norm over all decoder parameters.
    pub decoder_max: f64,
    pub loss: f64,
}

/// Backward of the mean [`tom_loss`] over `queries` of one dialogue, in
/// evaluation mode, reporting where gradient arrived.
pub fn bridge_gradients(
    encoder: &Weights<f32>,
    adapters: &AdapterSet<f32>,
    decoder: &Weights<f32>,
    tokens: &[usize],
    queries: &[ProbeQuery],
    layer: usize,
) -> Result<BridgeGradients> {
    if queries.is_empty() {
        return Err(Error::contract("bridge gradients need at least one query"));
    }
    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape, false);
    let ad = adapters.bind(&mut tape, true);
    let dec = decoder.bind(&mut tape, false);
    let payload = capture_live(&mut tape, &enc, Some(&ad), tokens, layer, None)?;
    let mut sum: Option<Var> = None;
    for q in queries {
        let loss = tom_loss(&mut tape, &dec, payload, layer, q)?;
        sum = Some(match sum {
            None => loss,
            Some(s) => tape.add(s, loss)?,
        });
    }
    let mean = tape.scale(sum.expect("nonempty"), 1.0 / queries.len() as f32)?;
    let grads = tape.backward(mean)?;
    Ok(BridgeGradients {
        adapters: ad
            .entries
            .iter()
            .map(|(&k, &(a, b))| (k, (grads.sq_norm(a), grads.sq_norm(b))))
            .collect(),
        decoder_max: dec.vars().into_iter().map(|v| grads.sq_norm(v)).fold(0.0, f64::max),
        loss: tape.value(mean).item() as f64,
    })
}

/// Layer with the highest mean accuracy over (state kind, agent) cells;
/// the smallest layer wins ties.
pub fn select_intervention_layer(report: &TraceReport) -> Result<usize> {
    let means = report.layer_means();
    if means.is_empty() {
        return Err(Error::contract("cannot select a layer from an empty report"));
    }
    if means.len() < 2 {
        return Err(Error::contract(
            "layer selection needs a report over at least two layers",
        ));
    }
    let mut best = means[0];
    for &(l, m) in &means[1..] {
        if m > best.1 {
            best = (l, m);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::taskgen::{gen_negotiation, Scenario, StateKind, Vocab};
    use crate::tracing::SampleRecord;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: Vocab::standard().len(),
            max_seq: 256,
        }
    }

    #[test]
    fn config_rules() {
        let c = cfg();
        assert!(SteerConfig::standard(1).validate(&c).is_ok());
        let mut bad = SteerConfig::standard(1);
        bad.adapter = AdapterSpec::standard([0, 2]);
        assert!(bad.validate(&c).is_err());
        let mut bad = SteerConfig::standard(1);
        bad.stop.patience = 0;
        assert!(bad.validate(&c).is_err());
        let mut bad = SteerConfig::standard(1);
        bad.stop.min_delta = 0.0;
        assert!(bad.validate(&c).is_err());
        assert!(SteerConfig::standard(3).validate(&c).is_err());
    }

    #[test]
    fn one_sample_one_epoch_is_one_step() {
        let w = init_weights(cfg(), 1).unwrap();
        let mut sc = SteerConfig::standard(1);
        sc.stop.max_epochs = 1;
        let ad = AdapterSet::new(cfg(), sc.adapter.clone(), 3).unwrap();
        let data = gen_negotiation(5, 2);
        let out = steer_train(&w, ad, &w, &data[..1], &data[1..], &sc).unwrap();
        assert_eq!(out.history.epochs.len(), 1);
        assert_eq!(out.history.epochs[0].steps, 1);
        assert_eq!(out.history.stop_reason, StopReason::MaxEpochs);
    }

    #[test]
    fn empty_train_set_rejected() {
        let w = init_weights(cfg(), 1).unwrap();
        let sc = SteerConfig::standard(1);
        let ad = AdapterSet::new(cfg(), sc.adapter.clone(), 3).unwrap();
        let data = gen_negotiation(5, 2);
        assert!(steer_train(&w, ad, &w, &[], &data, &sc).is_err());
    }

    fn query() -> ProbeQuery {
        let v = Vocab::standard();
        ProbeQuery::new(
            v.tokenize("question : what will agent1 do next ? answer :"),
            vec![vec![v.id("propose")], vec![v.id("accept")]],
            0,
            StateKind::Intention,
            1,
        )
        .unwrap()
    }

    #[test]
    fn detached_payload_and_live_decoder_rejected() {
        let w = init_weights(cfg(), 1).unwrap();
        let mut tape = Tape::<f32>::new();
        let dec = w.bind(&mut tape, false);
        let detached = tape.constant(Tensor::zeros(&[3, 16]));
        assert!(tom_loss(&mut tape, &dec, detached, 1, &query()).is_err());

        let mut tape = Tape::<f32>::new();
        let dec = w.bind(&mut tape, true);
        let live = tape.leaf(Tensor::zeros(&[3, 16]), true);
        assert!(tom_loss(&mut tape, &dec, live, 1, &query()).is_err());
    }

    #[test]
    fn saturated_decoder_gives_vanishing_loss() {
        // Blocks contribute nothing; every position's residual points at the
        // gold token's embedding, and a large final gain saturates the logits.
        let c = cfg();
        let gold = Vocab::standard().id("propose");
        let mut w = init_weights(c, 1).unwrap();
        for layer in &mut w.layers {
            for p in &mut layer.proj {
                *p = Tensor::zeros(p.shape());
            }
        }
        w.tok_emb = Tensor::zeros(w.tok_emb.shape());
        w.tok_emb.data_mut()[gold * c.d_model] = 1.0;
        w.pos_emb = Tensor::from_fn(w.pos_emb.shape(), |i| if i % c.d_model == 0 { 1.0 } else { 0.0 });
        w.final_norm = Tensor::filled(w.final_norm.shape(), 100.0);
        let mut tape = Tape::<f32>::new();
        let dec = w.bind(&mut tape, false);
        let payload = tape.leaf(Tensor::filled(&[3, 16], 0.5), true);
        let loss = tom_loss(&mut tape, &dec, payload, 1, &query()).unwrap();
        assert!(tape.value(loss).item() < 1e-6, "loss {}", tape.value(loss).item());
    }

    #[test]
    fn cached_path_matches_full_path() {
        let w = init_weights(cfg(), 4).unwrap();
        let mut cache = SuffixCache::new(&w, 1);
        let mut tape = Tape::<f32>::new();
        let dec = w.bind(&mut tape, false);
        let payload = tape.leaf(Tensor::from_fn(&[5, 16], |i| ((i * 7 % 11) as f32 - 5.0) / 5.0), true);
        let full = tom_loss(&mut tape, &dec, payload, 1, &query()).unwrap();
        let cached = cached_loss(&mut tape, &dec, payload, 1, &query(), &mut cache).unwrap();
        let (a, b) = (tape.value(full).item(), tape.value(cached).item());
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    fn report(acc: &[(usize, usize, usize)]) -> TraceReport {
        let mut records = Vec::new();
        for &(layer, correct, n) in acc {
            for i in 0..n {
                records.push(SampleRecord {
                    sample_id: i as u64,
                    layer: Some(layer),
                    kind: StateKind::Desire,
                    agent: 1,
                    correct: i < correct,
                    tied: false,
                });
            }
        }
        let layers: Vec<usize> = acc.iter().map(|a| a.0).collect();
        TraceReport::from_records(&layers, Scenario::Negotiation, records)
    }

    #[test]
    fn layer_selection() {
        assert_eq!(
            select_intervention_layer(&report(&[(2, 40, 100), (6, 35, 100)])).unwrap(),
            2
        );
        assert_eq!(
            select_intervention_layer(&report(&[(2, 5, 10), (3, 5, 10)])).unwrap(),
            2
        );
        assert_eq!(
            select_intervention_layer(&report(&[(2, 1, 10), (3, 5, 10)])).unwrap(),
            3
        );
        assert!(select_intervention_layer(&report(&[])).is_err());
        assert!(select_intervention_layer(&report(&[(2, 1, 10)])).is_err());
    }
}
