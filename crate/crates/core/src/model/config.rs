// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy transformer (pre-norm blocks, learned positions,
/// tied unembedding).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    /// Desk-scale default: 8 layers, width 64, 4 heads, FFN 256, 256 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.n_layers,
            });
        }
        Ok(())
    }
}

/// The seven linear projection sites of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Site {
    pub const ALL: [Site; 7] = [Site::Q, Site::K, Site::V, Site::O, Site::Gate, Site::Up, Site::Down];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Gate => "gate",
            Site::Up => "up",
            Site::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// (input width, output width) of the projection.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Site::Q | Site::K | Site::V | Site::O => (cfg.d_model, cfg.d_model),
            Site::Gate | Site::Up => (cfg.d_model, cfg.d_ff),
            Site::Down => (cfg.d_ff, cfg.d_model),
        }
    }

    /// Projections writing back into the residual stream.
    pub fn is_residual_output(self) -> bool {
        matches!(self, Site::O | Site::Down)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::config(format!("unknown projection site '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk(100).validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = ModelConfig::desk(100);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 4;
        cfg.max_seq = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn site_names_round_trip() {
        for site in Site::ALL {
            assert_eq!(site.name().parse::<Site>().unwrap(), site);
        }
    }
}
