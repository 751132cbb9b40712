// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashSet};

use mindpatch::taskgen::{
    gen_negotiation, gen_persuasion, make_queries, make_queries_at, split, Act, AgentState, DialogueSample, Ratios,
    Stage, UNK,
};

/// Act read from the surface text alone.
fn read_act(text: &str) -> Act {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.contains(&"propose") || text.starts_with("ok , you take") || text.starts_with("we should go") {
        Act::Propose
    } else if words.contains(&"accept") || words.contains(&"deal") {
        Act::Accept
    } else if words[0] == "no" || words[0] == "sorry" {
        Act::Reject
    } else if words.last() == Some(&"?") {
        Act::Ask
    } else {
        Act::Inform
    }
}

fn words_in<'a>(text: &'a str, vocab: &[&str]) -> Vec<&'a str> {
    text.split_whitespace().filter(|w| vocab.contains(w)).collect()
}

fn read_intention(s: &DialogueSample, agent: u8, t: usize) -> Act {
    let own: Vec<(usize, &str)> = s
        .turns
        .iter()
        .enumerate()
        .filter(|(_, tr)| tr.speaker == agent)
        .map(|(i, tr)| (i, tr.text.as_str()))
        .collect();
    let pick = own.iter().find(|(i, _)| *i >= t).or(own.last()).unwrap();
    read_act(pick.1)
}

fn read_negotiation(s: &DialogueSample, t: usize) -> [AgentState; 2] {
    const ITEMS: [&str; 3] = ["food", "water", "firewood"];
    let reveal = |agent: u8| {
        s.turns
            .iter()
            .position(|tr| tr.speaker == agent && (tr.text.contains("most") || tr.text.contains("top")))
            .unwrap()
    };
    let order = |agent: u8| -> Vec<String> {
        words_in(&s.turns[reveal(agent)].text, &ITEMS)
            .into_iter()
            .map(String::from)
            .collect()
    };
    let state = |agent: u8| {
        let other = 3 - agent;
        AgentState {
            desire: order(agent),
            belief: if reveal(other) < t {
                order(other)[0].clone()
            } else {
                "unknown".into()
            },
            intention: read_intention(s, agent, t),
        }
    };
    [state(1), state(2)]
}

fn read_persuasion(s: &DialogueSample, t: usize) -> [AgentState; 2] {
    const OPTIONS: [&str; 2] = ["hike", "beach"];
    let pitch = s.turns.iter().find(|tr| tr.text.starts_with("we should go")).unwrap();
    let target = words_in(&pitch.text, &OPTIONS)[0].to_owned();
    let stated = s
        .turns
        .iter()
        .position(|tr| tr.speaker == 2 && tr.text.contains("i think"))
        .unwrap();
    let text = &s.turns[stated].text;
    let pref = words_in(text, &OPTIONS)[0].to_owned();
    let judged = if text.contains("risky") { "risky" } else { "safe" };
    let reassured = s
        .turns
        .iter()
        .position(|tr| tr.text.starts_with("trust me"))
        .is_some_and(|i| i < t);
    [
        AgentState {
            desire: vec![target],
            belief: if stated < t { pref.clone() } else { "unknown".into() },
            intention: read_intention(s, 1, t),
        },
        AgentState {
            desire: vec![pref],
            belief: if reassured { "safe".into() } else { judged.into() },
            intention: read_intention(s, 2, t),
        },
    ]
}

#[test]
fn independent_reader_recovers_every_label() {
    for s in gen_negotiation(11, 400) {
        for t in 0..=s.turns.len() {
            assert_eq!(
                read_negotiation(&s, t),
                s.label_snapshots[t],
                "negotiation {} at {t}",
                s.id
            );
        }
    }
    for s in gen_persuasion(11, 400) {
        for t in 0..=s.turns.len() {
            assert_eq!(
                read_persuasion(&s, t),
                s.label_snapshots[t],
                "persuasion {} at {t}",
                s.id
            );
        }
    }
}

fn pair_counts(seed: u64) -> BTreeMap<(Vec<String>, Vec<String>), usize> {
    let mut counts = BTreeMap::new();
    for s in gen_negotiation(seed, 1000) {
        *counts
            .entry((s.final_labels[0].desire.clone(), s.final_labels[1].desire.clone()))
            .or_default() += 1;
    }
    counts
}

#[test]
fn desire_pairs_are_uniform_over_36_combinations() {
    let n = 1000.0;
    let p: f64 = 1.0 / 36.0;
    let sigma = (n * p * (1.0 - p)).sqrt();
    let counts = pair_counts(0);
    assert_eq!(counts.len(), 36);
    for (k, &c) in &counts {
        assert!((c as f64 - n * p).abs() <= 3.0 * sigma, "{k:?}: {c}");
    }
    // Goodness of fit across seeds; 66.62 is the 0.999 quantile of
    // chi-square with 35 degrees of freedom.
    for seed in 0..20 {
        let chi2: f64 = pair_counts(seed)
            .values()
            .map(|&c| (c as f64 - n * p).powi(2) / (n * p))
            .sum();
        assert!(chi2 < 66.62, "seed {seed}: chi2 {chi2}");
    }
}

#[test]
fn persuadee_desires_are_uniform() {
    let n = 1000.0;
    let hikes = gen_persuasion(42, 1000)
        .iter()
        .filter(|s| s.final_labels[1].desire[0] == "hike")
        .count() as f64;
    let sigma = (n * 0.25f64).sqrt();
    assert!((hikes - n / 2.0).abs() <= 3.0 * sigma, "hike count {hikes}");
}

#[test]
fn gold_is_always_a_candidate() {
    let mut corpus = gen_negotiation(5, 500);
    corpus.extend(gen_persuasion(5, 500));
    for s in &corpus {
        for t in 0..=s.turns.len() {
            for q in make_queries_at(s, t).unwrap() {
                assert!(q.gold < q.candidates.len());
            }
        }
        for st in Stage::ALL {
            assert_eq!(make_queries(s, st).unwrap().len(), 6);
        }
    }
}

#[test]
fn generated_corpora_never_hit_unk() {
    let mut tokens = 0usize;
    for s in gen_negotiation(8, 300).iter().chain(&gen_persuasion(8, 300)) {
        let ids = s.dialogue_tokens(s.turns.len());
        tokens += ids.len();
        assert!(!ids.contains(&UNK));
        for q in make_queries(s, Stage::Final).unwrap() {
            assert!(!q.question.contains(&UNK));
            assert!(q.candidates.iter().all(|c| !c.contains(&UNK)));
        }
    }
    assert!(tokens > 0);
}

#[test]
fn split_is_disjoint_and_eval_stages_are_one_two_one() {
    for n in [40, 100, 1000] {
        let sp = split(
            gen_negotiation(42, n),
            Ratios {
                train: 0.8,
                val: 0.1,
                eval: 0.1,
            },
            42,
        )
        .unwrap();
        let ids = |v: &[DialogueSample]| v.iter().map(|s| s.id).collect::<HashSet<_>>();
        let (a, b, c) = (ids(&sp.train), ids(&sp.val), ids(&sp.eval));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(a.len() + b.len() + c.len(), n);
        let m = sp.eval.len() as f64;
        let count = |st| sp.eval.iter().filter(|s| s.stage == st).count() as f64;
        assert!((count(Stage::Beginning) - m / 4.0).abs() <= 1.0);
        assert!((count(Stage::Middle) - m / 2.0).abs() <= 1.0);
        assert!((count(Stage::Final) - m / 4.0).abs() <= 1.0);
    }
}

#[test]
fn corpus_digest_depends_only_on_seed_n_and_scenario() {
    use mindpatch::taskgen::corpus_digest;
    assert_eq!(
        corpus_digest(&gen_negotiation(3, 20)),
        corpus_digest(&gen_negotiation(3, 20))
    );
    assert_ne!(
        corpus_digest(&gen_negotiation(3, 20)),
        corpus_digest(&gen_negotiation(4, 20))
    );
    assert_ne!(
        corpus_digest(&gen_negotiation(3, 20)),
        corpus_digest(&gen_persuasion(3, 20))
    );
}

#[test]
fn jsonl_round_trip() {
    use mindpatch::taskgen::{read_jsonl, write_jsonl};
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    let c = gen_persuasion(2, 30);
    write_jsonl(&p, &c).unwrap();
    assert_eq!(read_jsonl(&p).unwrap(), c);
}
