//! Small pieces shared by the three training loops.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epoch-loss moving-average window for the non-increasing trend check.
    #[serde(default = "default_window")]
    pub smoothing_window: usize,
}

fn default_window() -> usize {
    3
}

impl TrainConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{stage}.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}.batch_size must be >= 1")));
        }
        if self.smoothing_window == 0 {
            return Err(Error::Config(format!("{stage}.smoothing_window must be >= 1")));
        }
        Ok(())
    }
}

/// Shuffled mini-batch index lists for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// True when the moving average of `losses` never increases.
pub fn smoothed_non_increasing(losses: &[f64], window: usize) -> bool {
    if losses.len() <= window {
        return true;
    }
    let avgs: Vec<f64> = losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    avgs.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}

pub(crate) fn warn_on_trend(stage: &str, losses: &[f64], window: usize) {
    if !smoothed_non_increasing(losses, window) {
        log::warn!("{stage}: smoothed training loss increased (window {window}): {losses:?}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_check() {
        assert!(smoothed_non_increasing(&[3.0, 2.0, 2.5, 1.0, 0.9], 2));
        assert!(!smoothed_non_increasing(&[1.0, 1.0, 2.0, 3.0], 2));
        assert!(smoothed_non_increasing(&[1.0], 3));
    }
}
