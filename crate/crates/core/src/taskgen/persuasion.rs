// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;

use crate::taskgen::{
    draw_stage, intention_at, sample_rng, Act, AgentState, DialogueSample, Scenario, StageCuts, Turn,
};

pub const OPTIONS: [&str; 2] = ["hike", "beach"];

const GREETINGS: [(&str, Act); 3] = [
    ("hello , how are you ?", Act::Ask),
    ("hi friend , ready for the weekend ?", Act::Ask),
    ("good to see you .", Act::Inform),
];

/// Scripted persuasions. Agent 1 (persuader) proposes a trip; agent 2
/// (persuadee) states its preferred option and whether it judges the
/// proposed trip safe or risky. A risky judgement may be answered by a
/// reassurance turn that shifts the persuadee's belief to safe. The
/// persuadee accepts iff it ends up judging the trip safe.
pub fn gen_persuasion(seed: u64, n: usize) -> Vec<DialogueSample> {
    (0..n as u64).map(|id| one(seed, id)).collect()
}

fn one(seed: u64, id: u64) -> DialogueSample {
    let mut rng = sample_rng(seed ^ 0x7065_7273, id);
    let target = OPTIONS[rng.gen_range(0..2)];
    let pref = OPTIONS[rng.gen_range(0..2)];
    let initial = if rng.gen_bool(0.5) { "safe" } else { "risky" };
    let shift = initial == "risky" && rng.gen_bool(0.5);
    let n_greet = rng.gen_range(1..=2usize);

    let mut turns = Vec::new();
    for i in 0..n_greet {
        let (text, act) = GREETINGS[rng.gen_range(0..GREETINGS.len())];
        turns.push(Turn {
            speaker: if i % 2 == 0 { 1 } else { 2 },
            text: text.into(),
            act,
        });
    }
    turns.push(Turn {
        speaker: 1,
        text: format!("we should go to the {target} this weekend ."),
        act: Act::Propose,
    });
    let stated_at = turns.len();
    let text = if pref == target {
        format!("i would like the {target} too , but i think it is {initial} .")
    } else {
        format!("i would rather go to the {pref} , and i think the {target} is {initial} .")
    };
    turns.push(Turn {
        speaker: 2,
        text,
        act: Act::Inform,
    });
    let beginning = turns.len();
    let mut shift_at = None;
    if shift {
        shift_at = Some(turns.len());
        turns.push(Turn {
            speaker: 1,
            text: format!("trust me , the guides checked the {target} , it is safe ."),
            act: Act::Inform,
        });
    }
    let convinced = initial == "safe" || shift;
    turns.push(if convinced {
        Turn {
            speaker: 2,
            text: "ok , sounds good , i accept .".into(),
            act: Act::Accept,
        }
    } else {
        Turn {
            speaker: 2,
            text: format!("sorry , the {target} is not worth the risk ."),
            act: Act::Reject,
        }
    });
    if rng.gen_bool(0.5) {
        let text = if convinced {
            "great , see you there ."
        } else {
            "ok , maybe next time ."
        };
        turns.push(Turn {
            speaker: 1,
            text: text.into(),
            act: Act::Inform,
        });
    }
    let n = turns.len();
    let middle = if beginning + 1 < n {
        rng.gen_range(beginning + 1..n)
    } else {
        beginning
    };
    let stage = draw_stage(&mut rng);

    let state = |agent: u8, t: usize| {
        if agent == 1 {
            AgentState {
                desire: vec![target.to_owned()],
                belief: if t > stated_at {
                    pref.to_owned()
                } else {
                    "unknown".to_owned()
                },
                intention: intention_at(&turns, 1, t),
            }
        } else {
            let shifted = shift_at.is_some_and(|s| t > s);
            AgentState {
                desire: vec![pref.to_owned()],
                belief: if shifted { "safe".to_owned() } else { initial.to_owned() },
                intention: intention_at(&turns, 2, t),
            }
        }
    };
    let label_snapshots: Vec<[AgentState; 2]> = (0..=n).map(|t| [state(1, t), state(2, t)]).collect();
    DialogueSample {
        id,
        scenario: Scenario::Persuasion,
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
