// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration. Every command reads the sections it needs and
//! names the first missing key.

use std::path::Path;

use mindpatch::adapters::AdapterSpec;
use mindpatch::model::{ModelConfig, Schedule, Site};
use mindpatch::steering::{SteerConfig, StopRule};
use mindpatch::taskgen::{Ratios, Scenario, Vocab};
use mindpatch::tracing::ProbeConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: Option<RunSection>,
    pub corpus: Option<CorpusSection>,
    pub model: Option<ModelSection>,
    pub pretrain: Option<PretrainSection>,
    pub trace: Option<TraceSection>,
    pub steer: Option<SteerSection>,
    pub generate: Option<GenerateSection>,
    pub probe: Option<ProbeSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub scenario: Scenario,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n: usize,
    pub train: f64,
    pub val: f64,
    pub eval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerSection {
    pub layer: usize,
    pub adapter_layers: Vec<usize>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub loss_floor: f64,
}

/// Intervention layer for generation: a fixed index or `"auto"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerChoice {
    Fixed(usize),
    Auto(AutoWord),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoWord {
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub layer: LayerChoice,
    /// Agent whose task instruction prompts the decoder.
    pub agent: u8,
    pub max_new: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub steps: usize,
    pub lr: f64,
    pub test_fraction: f64,
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing section [{section}]"))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_owned()))
    }

    pub fn run(&self) -> Result<&RunSection, CliError> {
        self.run.as_ref().ok_or_else(|| missing("run"))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        Ok(self.run()?.seed)
    }

    pub fn ratios(&self) -> Result<Ratios, CliError> {
        let c = self.corpus.as_ref().ok_or_else(|| missing("corpus"))?;
        let r = Ratios {
            train: c.train,
            val: c.val,
            eval: c.eval,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn corpus(&self) -> Result<&CorpusSection, CliError> {
        let c = self.corpus.as_ref().ok_or_else(|| missing("corpus"))?;
        if c.n == 0 {
            return Err(CliError::Config("corpus.n must be at least 1".into()));
        }
        Ok(c)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = self.model.as_ref().ok_or_else(|| missing("model"))?;
        let cfg = ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: Vocab::standard().len(),
            max_seq: m.max_seq,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<Schedule, CliError> {
        let p = self.pretrain.as_ref().ok_or_else(|| missing("pretrain"))?;
        Ok(Schedule {
            steps: p.steps,
            batch: p.batch,
            lr: p.lr,
            warmup: p.warmup,
            weight_decay: p.weight_decay,
            clip: p.clip,
            seed: self.seed()?,
        })
    }

    pub fn trace_layers(&self) -> Result<Vec<usize>, CliError> {
        let t = self.trace.as_ref().ok_or_else(|| missing("trace"))?;
        if t.layers.is_empty() {
            return Err(CliError::Config("trace.layers must not be empty".into()));
        }
        Ok(t.layers.clone())
    }

    pub fn steer_config(&self) -> Result<SteerConfig, CliError> {
        let s = self.steer.as_ref().ok_or_else(|| missing("steer"))?;
        let cfg = SteerConfig {
            layer: s.layer,
            adapter: AdapterSpec {
                rank: s.rank,
                alpha: s.alpha,
                dropout_p: s.dropout,
                target_sites: Site::ALL.to_vec(),
                target_layers: s.adapter_layers.clone(),
            },
            lr: s.lr,
            batch: s.batch,
            weight_decay: s.weight_decay,
            stop: StopRule {
                max_epochs: s.max_epochs,
                patience: s.patience,
                min_delta: s.min_delta,
                loss_floor: s.loss_floor,
            },
            seed: self.seed()?,
        };
        cfg.validate(&self.model_config()?)?;
        Ok(cfg)
    }

    pub fn generate(&self) -> Result<&GenerateSection, CliError> {
        let g = self.generate.as_ref().ok_or_else(|| missing("generate"))?;
        if !(1..=2).contains(&g.agent) {
            return Err(CliError::Config(format!(
                "generate.agent must be 1 or 2, got {}",
                g.agent
            )));
        }
        Ok(g)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig, CliError> {
        let p = self.probe.as_ref().ok_or_else(|| missing("probe"))?;
        Ok(ProbeConfig {
            steps: p.steps,
            lr: p.lr,
            test_fraction: p.test_fraction,
            seed: self.seed()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = include_str!("../configs/desk.toml");

    #[test]
    fn desk_config_parses_completely() {
        let c = Config::parse(FULL).unwrap();
        assert_eq!(c.seed().unwrap(), 42);
        assert_eq!(c.model_config().unwrap().n_layers, 8);
        assert!(c.steer_config().is_ok());
        assert!(c.probe_config().is_ok());
        assert_eq!(c.generate().unwrap().layer, LayerChoice::Auto(AutoWord::Auto));
    }

    #[test]
    fn missing_seed_is_named() {
        let text = FULL.replace("seed = 42\n", "");
        let err = Config::parse(&text).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_layers_are_rejected() {
        assert!(Config::parse(&FULL.replace("[trace]", "[trace]\ncolour = 1")).is_err());
        let c = Config::parse(&FULL.replace("adapter_layers = [0, 1, 2]", "adapter_layers = [0, 3]")).unwrap();
        assert!(c.steer_config().is_err());
        let c = Config::parse(&FULL.replace("layer = \"auto\"", "layer = 3")).unwrap();
        assert_eq!(c.generate().unwrap().layer, LayerChoice::Fixed(3));
    }
}
