// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::forward::forward_on_tape;
use crate::model::{init_weights, BoundWeights, ModelConfig, Weights};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, LinearSchedule};

/// Language-model training schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Schedule {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("schedule needs steps ≥ 1 and batch ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub weights: Weights<f32>,
    /// Batch loss before the first update.
    pub initial_loss: f64,
    /// Batch loss at the last step, before its update.
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Mean next-token cross-entropy of `tokens` (needs at least two tokens).
pub fn next_token_loss(tape: &mut Tape<f32>, w: &BoundWeights, tokens: &[usize]) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::contract("next-token loss needs at least two tokens"));
    }
    let input = &tokens[..tokens.len() - 1];
    let out = forward_on_tape(tape, w, None, input, &[], None, None, None)?;
    let logits = out.logits.expect("full pass");
    let weights = vec![1.0; input.len()];
    tape.cross_entropy(logits, &tokens[1..], &weights)
}

fn sequence_grads(weights: &Weights<f32>, tokens: &[usize]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, true);
    let loss = next_token_loss(&mut tape, &bound, tokens)?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    let g = bound
        .vars()
        .into_iter()
        .zip(weights.tensors())
        .map(|(v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, g))
}

/// Trains a fresh model (initialised from `schedule.seed`) on next-token
/// prediction over `corpus`. Batches walk seeded shuffles of the corpus.
pub fn pretrain_lm(config: ModelConfig, corpus: &[Vec<usize>], schedule: Schedule) -> Result<PretrainOutcome> {
    config.validate()?;
    schedule.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    if let Some(i) = corpus.iter().position(|s| s.len() < 2 || s.len() > config.max_seq + 1) {
        return Err(Error::contract(format!(
            "corpus sequence {i} has length {}, expected 2..={}",
            corpus[i].len(),
            config.max_seq + 1
        )));
    }
    let mut weights = init_weights(config, schedule.seed)?;
    let numels: Vec<usize> = weights.tensors().iter().map(|t| t.numel()).collect();
    let decay: Vec<bool> = weights.tensors().iter().map(|t| t.shape().len() == 2).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: schedule.weight_decay,
            ..Default::default()
        },
        &numels,
    );
    let lr = LinearSchedule {
        peak: schedule.lr,
        warmup: schedule.warmup,
        total: schedule.steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(0x9e37_79b9));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(schedule.steps);

    for step in 0..schedule.steps {
        let mut batch = Vec::with_capacity(schedule.batch);
        while batch.len() < schedule.batch {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = batch
            .par_iter()
            .map(|&i| sequence_grads(&weights, &corpus[i]))
            .collect();
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(x, g)| x.add_assign(g)),
            }
        }
        let n = batch.len() as f32;
        let mut grads = acc.expect("batch nonempty");
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        if schedule.clip > 0.0 {
            clip_global_norm(&mut grads, schedule.clip);
        }
        losses.push(total / batch.len() as f64);
        let mut params = weights.tensors_mut();
        opt.step(&mut params, &grads, lr.lr_at(step), &decay);
    }
    Ok(PretrainOutcome {
        weights,
        initial_loss: losses[0],
        final_loss: *losses.last().expect("steps ≥ 1"),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 16,
            max_seq: 32,
        }
    }

    fn sched(steps: usize) -> Schedule {
        Schedule {
            steps,
            batch: 2,
            lr: 3e-3,
            warmup: 0,
            weight_decay: 0.0,
            clip: 1.0,
            seed: 42,
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(pretrain_lm(tiny(), &[], sched(1)).is_err());
    }

    #[test]
    fn memorises_a_repeated_sequence() {
        let seq: Vec<usize> = vec![1, 4, 2, 9, 3, 3, 7, 12, 5, 1, 8, 6];
        let out = pretrain_lm(tiny(), &[seq], sched(500)).unwrap();
        assert!(out.final_loss < out.initial_loss);
        let tail = out.losses.iter().rev().take(1).copied().fold(f64::MAX, f64::min);
        assert!(tail < 0.05, "final loss {tail}");
    }

    #[test]
    fn same_schedule_same_digest() {
        let corpus = vec![vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1], vec![2, 2, 3, 3]];
        let a = pretrain_lm(tiny(), &corpus, sched(5)).unwrap();
        let b = pretrain_lm(tiny(), &corpus, sched(5)).unwrap();
        assert_eq!(a.weights.digest(), b.weights.digest());
        assert_eq!(a.losses, b.losses);
    }
}
