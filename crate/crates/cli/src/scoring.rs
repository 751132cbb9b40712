// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rule-based scoring of generated task responses.
//!
//! * `tom`: 1 when the response is built around the partner's actual state.
//!   Negotiation: the item offered with "you take the X" is the partner's top
//!   item. Persuasion: the response names the target and, if the persuadee
//!   currently judges the trip risky, reassures it is safe.
//! * `coherence`: share of response tokens that are lexicon words fitting the
//!   scenario. Transcript scaffolding (speaker tags, `:`, `question`, ...) and
//!   the other scenario's items do not fit; an item both offered and kept in
//!   one proposal counts against the kept mention.
//! * `strategy`: 1 for the move that advances the scripted goal, graded down
//!   for partial moves (0.5), the right act with the wrong content (0.25),
//!   and anything else (0).

use mindpatch::taskgen::{reference_response, DialogueSample, Scenario, Vocab, ITEMS, OPTIONS};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tom: f64,
    pub coherence: f64,
    pub strategy: f64,
}

impl Scores {
    /// Exact means; zero for an empty slice.
    pub fn mean(all: &[Scores]) -> Scores {
        if all.is_empty() {
            return Scores::default();
        }
        let n = all.len() as f64;
        Scores {
            tom: all.iter().map(|s| s.tom).sum::<f64>() / n,
            coherence: all.iter().map(|s| s.coherence).sum::<f64>() / n,
            strategy: all.iter().map(|s| s.strategy).sum::<f64>() / n,
        }
    }
}

/// Word following `lead` (a phrase) at its first occurrence, with its index.
fn after<'a>(words: &[&'a str], lead: &[&str]) -> Option<(usize, &'a str)> {
    let k = lead.len();
    (0..words.len().saturating_sub(k))
        .find(|&i| &words[i..i + k] == lead)
        .map(|i| (i + k, words[i + k]))
}

/// Words that frame transcripts and prompts rather than speak in them.
const SCAFFOLD: [&str; 7] = ["agent1", "agent2", ":", "question", "answer", "task", "response"];

fn coherence(words: &[&str], ids: &[usize], foreign: &[&str], clash: Option<usize>) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let v = Vocab::standard();
    let ok = ids
        .iter()
        .zip(words)
        .enumerate()
        .filter(|&(i, (&id, w))| v.is_lexical(id) && !foreign.contains(w) && !SCAFFOLD.contains(w) && Some(i) != clash)
        .count();
    ok as f64 / ids.len() as f64
}

/// Scores the response of `agent` to its task instruction, given the dialogue
/// up to the sample's stage.
pub fn score_response(sample: &DialogueSample, agent: u8, response: &[usize]) -> Scores {
    let v = Vocab::standard();
    let words: Vec<&str> = response.iter().map(|&i| v.word(i)).collect();
    match sample.scenario {
        Scenario::Negotiation => {
            let own = &sample.final_labels[agent as usize - 1].desire;
            let partner_top = sample.final_labels[2 - agent as usize].desire[0].as_str();
            let keep = if own[0] == partner_top {
                own[1].as_str()
            } else {
                own[0].as_str()
            };
            let item = |w: &str| ITEMS.contains(&w);
            let give = after(&words, &["you", "take", "the"]).filter(|(_, w)| item(w));
            let kept = after(&words, &["i", "take", "the"]).filter(|(_, w)| item(w));
            let clash = match (give, kept) {
                (Some((_, g)), Some((i, k))) if g == k => Some(i),
                _ => None,
            };
            let tom = give.is_some_and(|(_, g)| g == partner_top) as u8 as f64;
            let strategy = match (give, kept) {
                (None, None) => 0.0,
                _ => {
                    let hits =
                        give.is_some_and(|(_, g)| g == partner_top) as u8 + kept.is_some_and(|(_, k)| k == keep) as u8;
                    [0.25, 0.5, 1.0][hits as usize]
                }
            };
            Scores {
                tom,
                coherence: coherence(&words, response, &OPTIONS, clash),
                strategy,
            }
        }
        Scenario::Persuasion => {
            let target = sample.final_labels[0].desire[0].as_str();
            let risky = sample.label_snapshots[sample.cut()][1].belief == "risky";
            let named = words.contains(&target);
            let tom = named && (!risky || words.contains(&"safe"));
            let exact = reference_response(sample, agent, sample.cut()).is_some_and(|r| r == response);
            let strategy = if exact {
                1.0
            } else if tom {
                0.5
            } else if named {
                0.25
            } else {
                0.0
            };
            Scores {
                tom: tom as u8 as f64,
                coherence: coherence(&words, response, &ITEMS, None),
                strategy,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mindpatch::taskgen::{gen_negotiation, gen_persuasion, UNK};

    fn toks(s: &str) -> Vec<usize> {
        Vocab::standard().tokenize(s)
    }

    #[test]
    fn reference_responses_score_full_marks() {
        for s in gen_negotiation(3, 50).iter().chain(&gen_persuasion(3, 50)) {
            for agent in [1, 2] {
                if let Some(r) = reference_response(s, agent, s.cut()) {
                    let sc = score_response(s, agent, &r);
                    assert_eq!(
                        sc,
                        Scores {
                            tom: 1.0,
                            coherence: 1.0,
                            strategy: 1.0
                        },
                        "{}",
                        s.id
                    );
                }
            }
        }
    }

    #[test]
    fn naming_the_partner_top_item_earns_tom() {
        let s = &gen_negotiation(5, 1)[0];
        let top = &s.final_labels[1].desire[0];
        let other = ITEMS.iter().find(|i| *i != top).unwrap();
        assert_eq!(score_response(s, 1, &toks(&format!("you take the {top} ."))).tom, 1.0);
        assert_eq!(score_response(s, 1, &toks(&format!("you take the {other} ."))).tom, 0.0);
    }

    #[test]
    fn pure_unk_is_incoherent() {
        let s = &gen_negotiation(5, 1)[0];
        let sc = score_response(s, 1, &[UNK; 6]);
        assert_eq!(sc, Scores::default());
        assert_eq!(score_response(s, 1, &[]), Scores::default());
    }

    #[test]
    fn giving_and_keeping_one_item_costs_coherence() {
        let s = &gen_negotiation(5, 1)[0];
        let r = toks("you take the food and i take the food .");
        let sc = score_response(s, 1, &r);
        assert!((sc.coherence - 9.0 / 10.0).abs() < 1e-12);
        let foreign = toks("you take the hike .");
        assert!((score_response(s, 1, &foreign).coherence - 4.0 / 5.0).abs() < 1e-12);
        assert_eq!(score_response(s, 1, &toks(": : question answer")).coherence, 0.0);
    }

    #[test]
    fn strategy_is_graded() {
        let s = &gen_negotiation(9, 1)[0];
        let own = &s.final_labels[0].desire;
        let top = &s.final_labels[1].desire[0];
        let keep = if &own[0] == top { &own[1] } else { &own[0] };
        let wrong = ITEMS.iter().find(|i| *i != top && *i != keep).unwrap();
        let sc = |t: String| score_response(s, 1, &toks(&t)).strategy;
        assert_eq!(sc(format!("you take the {top} and i take the {keep} .")), 1.0);
        assert_eq!(sc(format!("you take the {top} and i take the {wrong} .")), 0.5);
        assert_eq!(sc(format!("you take the {wrong} and i take the {wrong} .")), 0.25);
        assert_eq!(sc("sounds good , i accept .".into()), 0.0);
    }

    #[test]
    fn means_are_exact() {
        let a = Scores {
            tom: 1.0,
            coherence: 0.5,
            strategy: 0.25,
        };
        let b = Scores {
            tom: 0.0,
            coherence: 1.0,
            strategy: 0.5,
        };
        assert_eq!(
            Scores::mean(&[a, b]),
            Scores {
                tom: 0.5,
                coherence: 0.75,
                strategy: 0.375
            }
        );
    }
}
