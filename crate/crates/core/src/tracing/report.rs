// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{Scenario, StateKind};

/// Exact chance accuracy: one over the candidate count.
pub fn chance_level(scenario: Scenario, kind: StateKind, agent: u8) -> f64 {
    let n = match (scenario, kind) {
        (_, StateKind::Intention) => 5,
        (Scenario::Negotiation, StateKind::Desire) => 6,
        (Scenario::Negotiation, StateKind::Belief) => 4,
        (Scenario::Persuasion, StateKind::Desire) => 2,
        (Scenario::Persuasion, StateKind::Belief) if agent == 1 => 3,
        (Scenario::Persuasion, StateKind::Belief) => 2,
    };
    1.0 / n as f64
}

/// `(layer, state, agent)`; `layer = None` is the unpatched text-input row.
pub type CellKey = (Option<usize>, StateKind, u8);

/// Correctness of one query at one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub layer: Option<usize>,
    pub kind: StateKind,
    pub agent: u8,
    pub correct: bool,
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCell {
    pub layer: Option<usize>,
    pub state: StateKind,
    pub agent: u8,
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
    pub chance: f64,
    pub ties: usize,
    pub v_info: Option<f64>,
}

/// One parsed CSV row: `(key, accuracy, n, v_info)`.
pub type CsvRow = (CellKey, f64, usize, Option<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub scenario: Scenario,
    pub layers: Vec<usize>,
    /// Sorted by key; the text-input row comes first.
    pub cells: Vec<TraceCell>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub records: Vec<SampleRecord>,
}

impl TraceReport {
    pub fn from_records(layers: &[usize], scenario: Scenario, records: Vec<SampleRecord>) -> Self {
        let mut acc: BTreeMap<CellKey, (usize, usize, usize)> = BTreeMap::new();
        for r in &records {
            let e = acc.entry((r.layer, r.kind, r.agent)).or_default();
            e.0 += r.correct as usize;
            e.1 += 1;
            e.2 += r.tied as usize;
        }
        let cells = acc
            .into_iter()
            .map(|((layer, state, agent), (correct, n, ties))| TraceCell {
                layer,
                state,
                agent,
                correct,
                n,
                accuracy: correct as f64 / n as f64,
                chance: chance_level(scenario, state, agent),
                ties,
                v_info: None,
            })
            .collect();
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        Self {
            scenario,
            layers,
            cells,
            notes: vec![
                "base row: decoder reads the raw dialogue text followed by the question, no injection".into(),
                "patching: single layer, decoder injection layer equals capture layer".into(),
                "desire answered as a full high-to-low ordering of the three items".into(),
            ],
            records,
        }
    }

    pub fn cell(&self, layer: Option<usize>, state: StateKind, agent: u8) -> Option<&TraceCell> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.state == state && c.agent == agent)
    }

    /// Mean accuracy over the (state, agent) cells of each patched layer.
    pub fn layer_means(&self) -> Vec<(usize, f64)> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for c in &self.cells {
            if let Some(l) = c.layer {
                let e = sums.entry(l).or_default();
                e.0 += c.accuracy;
                e.1 += 1;
            }
        }
        sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
    }

    /// Long format: `layer,state,agent,accuracy,n,v_info`, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,state,agent,accuracy,n,v_info\n");
        for c in &self.cells {
            let layer = c.layer.map_or("base".to_owned(), |l| l.to_string());
            let v = c.v_info.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{layer},{},{},{},{},{v}", c.state, c.agent, c.accuracy, c.n);
        }
        s
    }

    /// Wide format, one row per layer, columns Intent/Desire/Belief ×
    /// Agent 1/Agent 2, accuracies in percent.
    pub fn to_table_csv(&self) -> String {
        let mut s = String::from("Layer");
        for kind in StateKind::ALL {
            let label = match kind {
                StateKind::Intention => "Intent",
                StateKind::Desire => "Desire",
                StateKind::Belief => "Belief",
            };
            for agent in [1, 2] {
                let _ = write!(s, ",{label} Agent {agent}");
            }
        }
        s.push('\n');
        let rows = std::iter::once(None).chain(self.layers.iter().map(|&l| Some(l)));
        for layer in rows {
            let _ = write!(s, "{}", layer.map_or("Base".to_owned(), |l| l.to_string()));
            for kind in StateKind::ALL {
                for agent in [1, 2] {
                    match self.cell(layer, kind, agent) {
                        Some(c) => {
                            let _ = write!(s, ",{:.2}", 100.0 * c.accuracy);
                        }
                        None => s.push(','),
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`Self::to_csv`] output back into rows.
    pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
        let mut lines = text.lines();
        if lines.next() != Some("layer,state,agent,accuracy,n,v_info") {
            return Err(Error::Format("unexpected trace CSV header".into()));
        }
        let bad = |line: &str| Error::Format(format!("malformed trace CSV row {line:?}"));
        lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(bad(line));
                }
                let layer = if f[0] == "base" {
                    None
                } else {
                    Some(f[0].parse().map_err(|_| bad(line))?)
                };
                let state = StateKind::ALL
                    .into_iter()
                    .find(|k| k.name() == f[1])
                    .ok_or_else(|| bad(line))?;
                let agent = f[2].parse().map_err(|_| bad(line))?;
                let accuracy = f[3].parse().map_err(|_| bad(line))?;
                let n = f[4].parse().map_err(|_| bad(line))?;
                let v = if f[5].is_empty() {
                    None
                } else {
                    Some(f[5].parse().map_err(|_| bad(line))?)
                };
                Ok(((layer, state, agent), accuracy, n, v))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(layer: Option<usize>, kind: StateKind, agent: u8, correct: bool) -> SampleRecord {
        SampleRecord {
            sample_id: 0,
            layer,
            kind,
            agent,
            correct,
            tied: false,
        }
    }

    #[test]
    fn single_sample_accuracy_is_binary() {
        let r = TraceReport::from_records(
            &[1],
            Scenario::Negotiation,
            vec![rec(Some(1), StateKind::Desire, 1, true)],
        );
        assert_eq!(r.cells[0].accuracy, 1.0);
        let r = TraceReport::from_records(
            &[1],
            Scenario::Negotiation,
            vec![rec(Some(1), StateKind::Desire, 1, false)],
        );
        assert_eq!(r.cells[0].accuracy, 0.0);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let records = (0..7)
            .map(|i| rec(Some(i % 2), StateKind::Belief, 2, i % 3 == 0))
            .chain([rec(None, StateKind::Belief, 2, true)])
            .collect();
        let r = TraceReport::from_records(&[0, 1], Scenario::Negotiation, records);
        let parsed = TraceReport::parse_csv(&r.to_csv()).unwrap();
        assert_eq!(parsed.len(), r.cells.len());
        for (c, (key, acc, n, v)) in r.cells.iter().zip(parsed) {
            assert_eq!(key, (c.layer, c.state, c.agent));
            assert_eq!((acc, n, v), (c.accuracy, c.n, c.v_info));
        }
    }

    #[test]
    fn chance_levels() {
        assert_eq!(chance_level(Scenario::Negotiation, StateKind::Desire, 1), 1.0 / 6.0);
        assert_eq!(chance_level(Scenario::Negotiation, StateKind::Belief, 2), 0.25);
        assert_eq!(chance_level(Scenario::Negotiation, StateKind::Intention, 1), 0.2);
    }
}
