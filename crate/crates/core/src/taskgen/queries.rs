// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::Result;
use crate::taskgen::{speaker_word, Act, DialogueSample, Scenario, Stage, StateKind, Vocab, ITEMS, OPTIONS};
use crate::tracing::ProbeQuery;

/// Intention candidates, in candidate order.
pub const ACTS: [Act; 5] = [Act::Propose, Act::Accept, Act::Reject, Act::Ask, Act::Inform];

fn desire_orders() -> Vec<Vec<&'static str>> {
    let mut out = Vec::with_capacity(6);
    for a in ITEMS {
        for b in ITEMS {
            for c in ITEMS {
                if a != b && b != c && a != c {
                    out.push(vec![a, b, c]);
                }
            }
        }
    }
    out
}

fn question(kind: StateKind, agent: u8, scenario: Scenario) -> String {
    let me = speaker_word(agent);
    let other = speaker_word(3 - agent);
    let body = match (scenario, kind) {
        (_, StateKind::Intention) => format!("what will {me} do next ?"),
        (Scenario::Negotiation, StateKind::Desire) => format!("rank what {me} needs from high to low ."),
        (Scenario::Negotiation, StateKind::Belief) => format!("what does {me} think {other} needs most ?"),
        (Scenario::Persuasion, StateKind::Desire) => format!("which trip does {me} want ?"),
        (Scenario::Persuasion, StateKind::Belief) if agent == 1 => format!("what does {me} think {other} wants ?"),
        (Scenario::Persuasion, StateKind::Belief) => format!("what does {me} think about the trip ?"),
    };
    format!("question : {body} answer :")
}

fn candidates(kind: StateKind, agent: u8, scenario: Scenario) -> Vec<Vec<&'static str>> {
    match (scenario, kind) {
        (_, StateKind::Intention) => ACTS.iter().map(|a| vec![a.word()]).collect(),
        (Scenario::Negotiation, StateKind::Desire) => desire_orders(),
        (Scenario::Negotiation, StateKind::Belief) => ITEMS.iter().chain(&["unknown"]).map(|w| vec![*w]).collect(),
        (Scenario::Persuasion, StateKind::Desire) => OPTIONS.iter().map(|w| vec![*w]).collect(),
        (Scenario::Persuasion, StateKind::Belief) if agent == 1 => {
            OPTIONS.iter().chain(&["unknown"]).map(|w| vec![*w]).collect()
        }
        (Scenario::Persuasion, StateKind::Belief) => vec![vec!["safe"], vec!["risky"]],
    }
}

/// One query per (state kind, agent), gold taken from the label snapshot
/// after `n_turns` turns. Candidates enumerate the closed answer space.
pub fn make_queries_at(sample: &DialogueSample, n_turns: usize) -> Result<Vec<ProbeQuery>> {
    let v = Vocab::standard();
    let t = n_turns.min(sample.turns.len());
    let snap = &sample.label_snapshots[t];
    let mut out = Vec::with_capacity(6);
    for kind in StateKind::ALL {
        for agent in [1u8, 2] {
            let st = &snap[agent as usize - 1];
            let gold_words: Vec<&str> = match kind {
                StateKind::Desire => st.desire.iter().map(String::as_str).collect(),
                StateKind::Belief => vec![st.belief.as_str()],
                StateKind::Intention => vec![st.intention.word()],
            };
            let cands = candidates(kind, agent, sample.scenario);
            let gold = cands
                .iter()
                .position(|c| *c == gold_words)
                .ok_or_else(|| crate::Error::contract(format!("gold {gold_words:?} outside the answer space")))?;
            out.push(ProbeQuery::new(
                v.tokenize(&question(kind, agent, sample.scenario)),
                cands.iter().map(|c| c.iter().map(|w| v.id(w)).collect()).collect(),
                gold,
                kind,
                agent,
            )?);
        }
    }
    Ok(out)
}

/// Queries at a truncation stage.
pub fn make_queries(sample: &DialogueSample, stage: Stage) -> Result<Vec<ProbeQuery>> {
    make_queries_at(sample, sample.stage_cuts.at(stage))
}

/// Task instruction for `agent`, if the scenario gives that agent a task.
pub fn instruction(sample: &DialogueSample, agent: u8) -> Option<Vec<usize>> {
    let me = speaker_word(agent);
    let text = match sample.scenario {
        Scenario::Negotiation => format!("task : you are {me} . give your partner what they need most . response :"),
        Scenario::Persuasion if agent == 1 => {
            let target = &sample.final_labels[0].desire[0];
            format!("task : you are {me} . persuade agent2 to go to the {target} . response :")
        }
        Scenario::Persuasion => return None,
    };
    Some(Vocab::standard().tokenize(&text))
}

/// The scripted good response to [`instruction`] after `n_turns` turns.
///
/// Negotiation: grant the partner its top item and keep one's own top item,
/// or one's second item when both tops coincide. Persuasion: reassure a
/// persuadee who judges the trip risky, otherwise restate the proposal.
pub fn reference_response(sample: &DialogueSample, agent: u8, n_turns: usize) -> Option<Vec<usize>> {
    let snap = &sample.label_snapshots[n_turns.min(sample.turns.len())];
    let text = match sample.scenario {
        Scenario::Negotiation => {
            let own = &sample.final_labels[agent as usize - 1].desire;
            let partner_top = &sample.final_labels[2 - agent as usize].desire[0];
            let keep = if &own[0] == partner_top { &own[1] } else { &own[0] };
            format!("you take the {partner_top} and i take the {keep} .")
        }
        Scenario::Persuasion if agent == 1 => {
            let target = &sample.final_labels[0].desire[0];
            if snap[1].belief == "risky" {
                format!("trust me , the guides checked the {target} , it is safe .")
            } else {
                format!("we should go to the {target} this weekend .")
            }
        }
        Scenario::Persuasion => return None,
    };
    Some(Vocab::standard().tokenize(&text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_negotiation, gen_persuasion, UNK};

    #[test]
    fn candidate_counts() {
        let s = &gen_negotiation(3, 1)[0];
        let qs = make_queries(s, Stage::Final).unwrap();
        assert_eq!(qs.len(), 6);
        for q in &qs {
            let expected = match q.kind {
                StateKind::Desire => 6,
                StateKind::Belief => 4,
                StateKind::Intention => 5,
            };
            assert_eq!(q.candidates.len(), expected);
        }
    }

    #[test]
    fn pre_revelation_belief_is_unknown() {
        let v = Vocab::standard();
        for s in gen_negotiation(9, 50) {
            let qs = make_queries_at(&s, 0).unwrap();
            for q in qs.iter().filter(|q| q.kind == StateKind::Belief) {
                assert_eq!(q.candidates[q.gold], vec![v.id("unknown")]);
            }
        }
    }

    #[test]
    fn instructions_and_responses_are_lexical() {
        for s in gen_negotiation(2, 50).iter().chain(&gen_persuasion(2, 50)) {
            for agent in [1, 2] {
                if let Some(i) = instruction(s, agent) {
                    assert!(!i.contains(&UNK));
                    let r = reference_response(s, agent, s.cut()).unwrap();
                    assert!(!r.contains(&UNK));
                }
            }
        }
    }
}
