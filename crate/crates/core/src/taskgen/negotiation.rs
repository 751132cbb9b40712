// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::Rng;

use crate::taskgen::{
    draw_stage, intention_at, sample_rng, Act, AgentState, DialogueSample, Scenario, StageCuts, Turn,
};

pub const ITEMS: [&str; 3] = ["food", "water", "firewood"];

const GREETINGS: [(&str, Act); 4] = [
    ("hello , how are you ?", Act::Ask),
    ("hi friend , ready for the trip ?", Act::Ask),
    ("i am excited for the camping trip .", Act::Inform),
    ("good to meet you .", Act::Inform),
];

const REVEALS: [&str; 3] = [
    "i need {0} most , then {1} , and {2} least .",
    "for me {0} is most important , then {1} , then {2} .",
    "my top need is {0} , then {1} , and {2} is lowest .",
];

const ACCEPTS: [&str; 2] = ["deal , that works for me .", "sounds good , i accept ."];

const CLOSINGS: [&str; 2] = ["thank you , enjoy the trip .", "great , see you at camp ."];

fn fill(template: &str, words: &[&str]) -> String {
    let mut s = template.to_owned();
    for (i, w) in words.iter().enumerate() {
        s = s.replace(&format!("{{{i}}}"), w);
    }
    s
}

/// Scripted negotiations over food, water and firewood.
///
/// Script: 0 to 3 greeting turns, one turn per agent revealing its full
/// priority order, then the first revealer proposes. Distinct top items lead
/// to a proposal granting each its top and an acceptance; a shared top item
/// leads to a self-serving proposal, a rejection, a concession and an
/// acceptance. An optional closing turn follows. Speakers alternate.
pub fn gen_negotiation(seed: u64, n: usize) -> Vec<DialogueSample> {
    (0..n as u64).map(|id| one(seed, id)).collect()
}

fn one(seed: u64, id: u64) -> DialogueSample {
    let mut rng = sample_rng(seed, id);
    let mut desires = [[0usize, 1, 2], [0, 1, 2]];
    desires[0].shuffle(&mut rng);
    desires[1].shuffle(&mut rng);
    let n_greet = rng.gen_range(0..=3usize);
    let first: u8 = if rng.gen_bool(0.5) { 1 } else { 2 };
    let speaker = |i: usize| if i.is_multiple_of(2) { first } else { 3 - first };
    let pri = |agent: u8| desires[agent as usize - 1];

    let mut turns = Vec::new();
    for i in 0..n_greet {
        let (text, act) = GREETINGS[rng.gen_range(0..GREETINGS.len())];
        turns.push(Turn {
            speaker: speaker(i),
            text: text.into(),
            act,
        });
    }
    let mut reveal_at = [0usize; 2];
    for _ in 0..2 {
        let s = speaker(turns.len());
        let p = pri(s);
        let text = fill(
            REVEALS[rng.gen_range(0..REVEALS.len())],
            &[ITEMS[p[0]], ITEMS[p[1]], ITEMS[p[2]]],
        );
        reveal_at[s as usize - 1] = turns.len();
        turns.push(Turn {
            speaker: s,
            text,
            act: Act::Inform,
        });
    }
    let beginning = turns.len();
    let proposer = speaker(turns.len());
    let responder = 3 - proposer;
    let (pp, rp) = (pri(proposer), pri(responder));
    let accept = ACCEPTS[rng.gen_range(0..ACCEPTS.len())];
    if pp[0] != rp[0] {
        turns.push(Turn {
            speaker: proposer,
            text: fill(
                "i propose you take the {0} and i take the {1} .",
                &[ITEMS[rp[0]], ITEMS[pp[0]]],
            ),
            act: Act::Propose,
        });
        turns.push(Turn {
            speaker: responder,
            text: accept.into(),
            act: Act::Accept,
        });
    } else {
        let top = ITEMS[pp[0]];
        turns.push(Turn {
            speaker: proposer,
            text: fill("i propose i take the {0} and you take the {1} .", &[top, ITEMS[pp[2]]]),
            act: Act::Propose,
        });
        turns.push(Turn {
            speaker: responder,
            text: fill("no , i need the {0} too .", &[top]),
            act: Act::Reject,
        });
        turns.push(Turn {
            speaker: proposer,
            text: fill("ok , you take the {0} and i take the {1} .", &[top, ITEMS[pp[1]]]),
            act: Act::Propose,
        });
        turns.push(Turn {
            speaker: responder,
            text: accept.into(),
            act: Act::Accept,
        });
    }
    if rng.gen_bool(0.5) {
        let text = CLOSINGS[rng.gen_range(0..CLOSINGS.len())];
        turns.push(Turn {
            speaker: speaker(turns.len()),
            text: text.into(),
            act: Act::Inform,
        });
    }
    let n = turns.len();
    let middle = rng.gen_range(beginning + 1..n);
    let stage = draw_stage(&mut rng);

    let state = |agent: u8, t: usize| {
        let other = 3 - agent;
        let belief = if t > reveal_at[other as usize - 1] {
            ITEMS[pri(other)[0]].to_owned()
        } else {
            "unknown".to_owned()
        };
        AgentState {
            desire: pri(agent).iter().map(|&i| ITEMS[i].to_owned()).collect(),
            belief,
            intention: intention_at(&turns, agent, t),
        }
    };
    let label_snapshots: Vec<[AgentState; 2]> = (0..=n).map(|t| [state(1, t), state(2, t)]).collect();
    DialogueSample {
        id,
        scenario: Scenario::Negotiation,
        final_labels: label_snapshots[n].clone(),
        label_snapshots,
        turns,
        stage,
        stage_cuts: StageCuts {
            beginning,
            middle,
            final_: n,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{Vocab, UNK};

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(gen_negotiation(42, 2), gen_negotiation(42, 2));
        assert_ne!(gen_negotiation(42, 2), gen_negotiation(43, 2));
    }

    #[test]
    fn turn_counts_and_permutations() {
        for s in gen_negotiation(1, 300) {
            assert!((4..=10).contains(&s.turns.len()), "{} turns", s.turns.len());
            for st in &s.final_labels {
                let mut d = st.desire.clone();
                d.sort();
                let mut items: Vec<String> = ITEMS.iter().map(|s| s.to_string()).collect();
                items.sort();
                assert_eq!(d, items);
            }
            let c = s.stage_cuts;
            assert!(c.beginning < c.middle && c.middle < c.final_);
        }
    }

    #[test]
    fn no_unknown_words() {
        let v = Vocab::standard();
        for s in gen_negotiation(5, 200) {
            for t in &s.turns {
                let ids = v.tokenize(&t.text);
                assert!(!ids.contains(&UNK), "{}", t.text);
                assert_eq!(v.detokenize(&ids), t.text);
            }
        }
    }
}
