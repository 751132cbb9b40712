// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scripted two-agent dialogues whose surface text determines belief, desire
//! and intention labels, plus the probe queries and task instructions built
//! on them.

mod corpus;
mod negotiation;
mod persuasion;
mod queries;
mod vocab;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{corpus_digest, pretrain_sequences, read_jsonl, split, write_jsonl, CorpusSplit, Ratios};
pub use negotiation::{gen_negotiation, ITEMS};
pub use persuasion::{gen_persuasion, OPTIONS};
pub use queries::{instruction, make_queries, make_queries_at, reference_response, ACTS};
pub use vocab::{Vocab, PAD, PLACEHOLDER, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Negotiation,
    Persuasion,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Negotiation => "negotiation",
            Scenario::Persuasion => "persuasion",
        })
    }
}

/// Mental-state axis of a probe query, in report column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Intention,
    Desire,
    Belief,
}

impl StateKind {
    pub const ALL: [StateKind; 3] = [StateKind::Intention, StateKind::Desire, StateKind::Belief];

    pub fn name(self) -> &'static str {
        match self {
            StateKind::Intention => "intention",
            StateKind::Desire => "desire",
            StateKind::Belief => "belief",
        }
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Propose,
    Accept,
    Reject,
    Ask,
    Inform,
}

impl Act {
    pub fn word(self) -> &'static str {
        match self {
            Act::Propose => "propose",
            Act::Accept => "accept",
            Act::Reject => "reject",
            Act::Ask => "ask",
            Act::Inform => "inform",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Beginning,
    Middle,
    Final,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Beginning, Stage::Middle, Stage::Final];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// 1 or 2.
    pub speaker: u8,
    pub text: String,
    pub act: Act,
}

/// One agent's mental state at a point in the dialogue.
///
/// Negotiation: `desire` orders the three items from high to low and
/// `belief` is the other agent's top item (or `unknown`). Persuasion:
/// `desire` is the single preferred option; the persuader's belief is the
/// persuadee's preference (or `unknown`), the persuadee's belief is its
/// safety judgement of the proposed trip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub desire: Vec<String>,
    pub belief: String,
    pub intention: Act,
}

/// Number of turns visible at each truncation stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCuts {
    pub beginning: usize,
    pub middle: usize,
    #[serde(rename = "final")]
    pub final_: usize,
}

impl StageCuts {
    pub fn at(&self, stage: Stage) -> usize {
        match stage {
            Stage::Beginning => self.beginning,
            Stage::Middle => self.middle,
            Stage::Final => self.final_,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub id: u64,
    pub scenario: Scenario,
    pub turns: Vec<Turn>,
    /// `label_snapshots[t]` holds both agents' states after the first `t`
    /// turns, for `t` in `0..=turns.len()`.
    pub label_snapshots: Vec<[AgentState; 2]>,
    pub final_labels: [AgentState; 2],
    pub stage: Stage,
    pub stage_cuts: StageCuts,
}

impl DialogueSample {
    /// Turns visible at this sample's stage.
    pub fn cut(&self) -> usize {
        self.stage_cuts.at(self.stage)
    }

    /// Tokens of the first `n_turns` turns, each rendered as
    /// `agentK : <text>`.
    pub fn dialogue_tokens(&self, n_turns: usize) -> Vec<usize> {
        let v = Vocab::standard();
        let mut out = Vec::new();
        for turn in &self.turns[..n_turns.min(self.turns.len())] {
            out.push(v.id(speaker_word(turn.speaker)));
            out.push(v.id(":"));
            out.extend(v.tokenize(&turn.text));
        }
        out
    }

    /// Dialogue tokens at the sample's stage.
    pub fn stage_tokens(&self) -> Vec<usize> {
        self.dialogue_tokens(self.cut())
    }
}

pub(crate) fn speaker_word(agent: u8) -> &'static str {
    if agent == 1 {
        "agent1"
    } else {
        "agent2"
    }
}

pub(crate) fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Next act of `agent` at or after turn `t`, else its last act.
pub(crate) fn intention_at(turns: &[Turn], agent: u8, t: usize) -> Act {
    turns[t.min(turns.len())..]
        .iter()
        .find(|tr| tr.speaker == agent)
        .or_else(|| turns.iter().rev().find(|tr| tr.speaker == agent))
        .map(|tr| tr.act)
        .expect("both agents speak")
}

/// Stage assignment in the 1:2:1 proportion.
pub(crate) fn draw_stage(rng: &mut ChaCha8Rng) -> Stage {
    use rand::Rng;
    match rng.gen_range(0..4) {
        0 => Stage::Beginning,
        3 => Stage::Final,
        _ => Stage::Middle,
    }
}
