// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use mindpatch::autodiff::Tensor;
use mindpatch::model::{init_weights, ModelConfig, Weights};
use mindpatch::taskgen::{gen_negotiation, gen_persuasion, make_queries, StateKind, Vocab, PLACEHOLDER};
use mindpatch::tracing::{
    causal_trace_sweep, null_features, patched_answer, text_answer, train_linear_probe, v_usable_info, Encoder,
    ProbeConfig, ProbeQuery,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> Weights<f32> {
    init_weights(
        ModelConfig {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: Vocab::standard().len(),
            max_seq: 256,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn uniform_unembedding_ties_to_the_lowest_index() {
    let mut w = model(1);
    w.tok_emb = Tensor::zeros(w.tok_emb.shape());
    let s = &gen_negotiation(2, 1)[0];
    let enc = Encoder::new(&w, None);
    for q in make_queries(s, s.stage).unwrap() {
        let p = enc.capture(&s.stage_tokens(), 2).unwrap();
        let sc = patched_answer(&w, &p, &q).unwrap();
        assert_eq!(sc.prediction, 0);
        assert!(sc.tied);
        assert_eq!(sc.ranking, (0..q.candidates.len()).collect::<Vec<_>>());
    }
}

#[test]
fn duplicate_candidates_are_rejected() {
    assert!(ProbeQuery::new(vec![5], vec![vec![6], vec![6]], 0, StateKind::Belief, 1).is_err());
}

#[test]
fn width_mismatch_is_rejected() {
    let w = model(1);
    let small = init_weights(
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ..w.config
        },
        1,
    )
    .unwrap();
    let s = &gen_negotiation(2, 1)[0];
    let p = Encoder::new(&small, None).capture(&s.stage_tokens(), 1).unwrap();
    let q = &make_queries(s, s.stage).unwrap()[0];
    assert!(patched_answer(&w, &p, q).is_err());
}

#[test]
fn self_payload_answers_like_the_placeholder_context() {
    let w = model(3);
    let s = &gen_persuasion(4, 1)[0];
    let n = s.stage_tokens().len();
    let ph = vec![PLACEHOLDER; n];
    let enc = Encoder::new(&w, None);
    for layer in 0..4 {
        let p = enc.capture(&ph, layer).unwrap();
        for q in make_queries(s, s.stage).unwrap() {
            let a = patched_answer(&w, &p, &q).unwrap();
            let b = text_answer(&w, &ph, &q).unwrap();
            assert_eq!(a.ranking, b.ranking);
            for (x, y) in a.loglik.iter().zip(&b.loglik) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn capture_shapes_and_determinism() {
    let w = model(5);
    let enc = Encoder::new(&w, None);
    let p = enc.capture(&[7], 0).unwrap();
    assert_eq!(p.grid.shape(), &[1, 32]);
    assert_eq!(enc.capture(&[7], 0).unwrap().source, p.source);
    assert!(enc.capture(&vec![7; 300], 0).is_err());
}

#[test]
fn cells_equal_an_independent_recount() {
    let w = model(6);
    let samples = gen_negotiation(9, 12);
    let layers = [0, 2, 3];
    let rep = causal_trace_sweep(&Encoder::new(&w, None), &w, &samples, &layers).unwrap();

    // Recount straight from the per-query answers.
    let mut counts: BTreeMap<(Option<usize>, String, u8), (usize, usize)> = BTreeMap::new();
    let enc = Encoder::new(&w, None);
    for s in &samples {
        let toks = s.stage_tokens();
        for q in make_queries(s, s.stage).unwrap() {
            let base = text_answer(&w, &toks, &q).unwrap();
            let e = counts.entry((None, q.kind.name().to_owned(), q.agent)).or_default();
            e.0 += (base.prediction == q.gold) as usize;
            e.1 += 1;
            for &l in &layers {
                let sc = patched_answer(&w, &enc.capture(&toks, l).unwrap(), &q).unwrap();
                let e = counts.entry((Some(l), q.kind.name().to_owned(), q.agent)).or_default();
                e.0 += (sc.prediction == q.gold) as usize;
                e.1 += 1;
            }
        }
    }
    assert_eq!(rep.cells.len(), counts.len());
    assert_eq!(rep.cells.len(), (layers.len() + 1) * 6);
    let mut total = 0;
    for c in &rep.cells {
        let (k, n) = counts[&(c.layer, c.state.name().to_owned(), c.agent)];
        assert_eq!((c.correct, c.n), (k, n));
        assert_eq!(c.accuracy, k as f64 / n as f64);
        assert_eq!(c.n, samples.len());
        total += c.correct;
    }
    assert_eq!(total, rep.records.iter().filter(|r| r.correct).count());
}

#[test]
fn single_sample_single_layer_is_binary() {
    let w = model(7);
    let rep = causal_trace_sweep(&Encoder::new(&w, None), &w, &gen_negotiation(1, 1), &[1]).unwrap();
    assert!(rep.cells.iter().all(|c| c.accuracy == 0.0 || c.accuracy == 1.0));
    assert!(causal_trace_sweep(&Encoder::new(&w, None), &w, &[], &[1]).is_err());
}

fn balanced_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|i| i % k).collect();
    y.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    y
}

fn entropy(y: &[usize], k: usize) -> f64 {
    let n = y.len() as f64;
    (0..k)
        .map(|c| y.iter().filter(|&&v| v == c).count() as f64 / n)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

#[test]
fn one_hot_representation_carries_the_label_entropy() {
    let (n, k) = (400, 4);
    let y = balanced_labels(n, k, 1);
    let x: Vec<Vec<f64>> = y
        .iter()
        .map(|&c| (0..k).map(|j| (j == c) as u8 as f64).collect())
        .collect();
    let cfg = ProbeConfig::default();
    let real = train_linear_probe(&x, &y, k, &cfg).unwrap();
    let null = train_linear_probe(&null_features(n), &y, k, &cfg).unwrap();
    let v = v_usable_info(&real, &null).unwrap();
    let h = entropy(&y, k);
    assert!((v.nats - h).abs() <= 0.05, "v {} vs H {h}", v.nats);
    assert_eq!(real.accuracy, 1.0);
}

#[test]
fn constant_representation_carries_nothing() {
    let (n, k) = (400, 4);
    let y = balanced_labels(n, k, 2);
    let x = vec![vec![3.0, -1.0]; n];
    let cfg = ProbeConfig::default();
    let real = train_linear_probe(&x, &y, k, &cfg).unwrap();
    let null = train_linear_probe(&null_features(n), &y, k, &cfg).unwrap();
    assert!(v_usable_info(&real, &null).unwrap().nats <= 0.05);
}

#[test]
fn permuted_labels_carry_nothing_and_sit_at_chance() {
    let (n, k, d) = (400, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = balanced_labels(n, k, 3);
    // Informative features: class centroid plus noise.
    let x: Vec<Vec<f64>> = y
        .iter()
        .map(|&c| {
            (0..d)
                .map(|j| if j == c { 2.0 } else { 0.0 } + rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let mut perm = y.clone();
    perm.shuffle(&mut rng);
    let cfg = ProbeConfig::default();
    let true_fit = train_linear_probe(&x, &y, k, &cfg).unwrap();
    let perm_fit = train_linear_probe(&x, &perm, k, &cfg).unwrap();
    let null = train_linear_probe(&null_features(n), &perm, k, &cfg).unwrap();
    assert!(v_usable_info(&perm_fit, &null).unwrap().nats <= 0.05);
    let chance = 1.0 / k as f64;
    let se = (chance * (1.0 - chance) / perm_fit.test_idx.len() as f64).sqrt();
    assert!(
        (perm_fit.accuracy - chance).abs() <= 3.0 * se,
        "permuted accuracy {}",
        perm_fit.accuracy
    );
    assert!(true_fit.accuracy >= perm_fit.accuracy - 3.0 * perm_fit.std_error());
}
