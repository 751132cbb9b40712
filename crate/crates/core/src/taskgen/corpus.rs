// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::taskgen::{instruction, make_queries_at, reference_response, DialogueSample, Stage};

/// Train/val/eval fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub val: f64,
    pub eval: f64,
}

impl Ratios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.eval];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios {parts:?} must be fractions summing to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<DialogueSample>,
    pub val: Vec<DialogueSample>,
    pub eval: Vec<DialogueSample>,
    pub ratios: Ratios,
    pub seed: u64,
}

/// Seeded shuffle, then partition. Val and eval sizes are floored and the
/// remainder goes to train. Eval stages are reassigned to a 1:2:1
/// beginning/middle/final mix.
pub fn split(mut corpus: Vec<DialogueSample>, ratios: Ratios, seed: u64) -> Result<CorpusSplit> {
    ratios.validate()?;
    if corpus.len() < 4 {
        return Err(Error::contract(format!(
            "corpus of {} samples is too small to split (need 4)",
            corpus.len()
        )));
    }
    let n = corpus.len();
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let (n_val, n_eval) = (floor(ratios.val), floor(ratios.eval));
    corpus.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval_part = corpus.split_off(n - n_eval);
    let val = corpus.split_off(n - n_eval - n_val);
    let train = corpus;

    let quarter = (n_eval as f64 / 4.0).round() as usize;
    let eval = eval_part
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            s.stage = if i < quarter {
                Stage::Beginning
            } else if i >= n_eval - quarter {
                Stage::Final
            } else {
                Stage::Middle
            };
            s
        })
        .collect();
    Ok(CorpusSplit {
        train,
        val,
        eval,
        ratios,
        seed,
    })
}

pub fn write_jsonl(path: &Path, samples: &[DialogueSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DialogueSample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Digest of the canonical JSON encoding of `samples`.
pub fn corpus_digest(samples: &[DialogueSample]) -> Digest {
    let mut h = Hasher::new();
    h.str("corpus");
    for s in samples {
        h.bytes(&serde_json::to_vec(s).expect("serialisable"));
    }
    h.finish()
}

/// Language-model training sequences.
///
/// For every sample and every distinct stage cut: the visible dialogue
/// followed by all question/answer pairs and task instruction/response
/// pairs in a seeded random order.
pub fn pretrain_sequences(samples: &[DialogueSample], seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in samples {
        let mut cuts: Vec<usize> = Stage::ALL.iter().map(|&st| s.stage_cuts.at(st)).collect();
        cuts.dedup();
        for cut in cuts {
            let mut segments: Vec<Vec<usize>> = make_queries_at(s, cut)?
                .into_iter()
                .map(|q| [q.question.as_slice(), &q.candidates[q.gold]].concat())
                .collect();
            for agent in [1, 2] {
                if let (Some(i), Some(r)) = (instruction(s, agent), reference_response(s, agent, cut)) {
                    segments.push([i, r].concat());
                }
            }
            segments.shuffle(&mut rng);
            let mut seq = s.dialogue_tokens(cut);
            segments.iter().for_each(|seg| seq.extend(seg));
            out.push(seq);
        }
    }
    Ok(out)
}
