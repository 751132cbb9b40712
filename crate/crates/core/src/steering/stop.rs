// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    LossFloor,
}

/// Early-stopping thresholds on the validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_epochs: usize,
    /// Consecutive epochs without sufficient improvement before stopping.
    pub patience: usize,
    /// An epoch improves only if it beats the best loss so far by more than
    /// this absolute amount.
    pub min_delta: f64,
    /// Stop as soon as the loss falls below this value.
    pub loss_floor: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            patience: 3,
            min_delta: 0.01,
            loss_floor: 0.1,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("max_epochs and patience must be at least 1"));
        }
        if self.min_delta.is_nan() || self.min_delta <= 0.0 {
            return Err(Error::config(format!("min_delta {} must be positive", self.min_delta)));
        }
        Ok(())
    }

    /// Decision after the epochs in `val_losses` (one per completed epoch,
    /// oldest first). Checked in order: loss floor, patience, epoch budget.
    ///
    /// The best loss is updated only by epochs that improve on it by more
    /// than `min_delta`.
    pub fn decide(&self, val_losses: &[f64]) -> Option<StopReason> {
        let last = *val_losses.last()?;
        if last < self.loss_floor {
            return Some(StopReason::LossFloor);
        }
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for &loss in val_losses {
            if best - loss > self.min_delta {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        if stale >= self.patience {
            return Some(StopReason::Patience);
        }
        if val_losses.len() >= self.max_epochs {
            return Some(StopReason::MaxEpochs);
        }
        None
    }
}

/// Runs `rule` over a whole loss sequence, returning the number of epochs
/// trained before stopping and the reason.
pub fn replay_stop(rule: &StopRule, val_losses: &[f64]) -> Option<(usize, StopReason)> {
    (1..=val_losses.len()).find_map(|n| rule.decide(&val_losses[..n]).map(|r| (n, r)))
}
