//! Objectives, optimizer and training loops: next-token cross-entropy for the
//! SFT reference, the DPO objective against a frozen reference, and
//! finite-difference verification of both gradients.

mod adam;
mod ce;
mod dpo;
pub mod gradcheck;
mod loops;

pub use adam::{adam_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use ce::{ce_loss, ce_loss_and_grad};
pub use dpo::{dpo_loss, dpo_loss_and_grad, dpo_pair_loss, prepare_pairs, DpoBatchResult, PreparedPair};
pub use gradcheck::{check_gradients, gradcheck, GradcheckReport, TensorCheck};
pub use loops::{train_dpo, train_sft, EpochStats, TrainOutcome};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// DPO temperature; unused by SFT.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// Sampling threshold applied to DPO training pairs; 0 keeps everything.
    pub delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.01,
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            grad_clip_norm: 1.0,
            delta: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::usage(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::usage("grad_clip_norm must be positive"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::usage(format!("delta must be non-negative, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Numerically stable `-ln σ(m)`.
pub fn neg_log_sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// Sums per-example gradients in input order, keeping reductions
/// independent of how the examples were scheduled across threads.
pub(crate) fn sum_in_order(parts: Vec<crate::lm::ModelParams>) -> Option<crate::lm::ModelParams> {
    let mut iter = parts.into_iter();
    let mut total = iter.next()?;
    for g in iter {
        total.add_scaled(&g, 1.0);
    }
    Some(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neg_log_sigmoid_values() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((neg_log_sigmoid(3f64.ln()) - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((neg_log_sigmoid(-50.0) - 50.0).abs() < 1e-12);
        assert!(neg_log_sigmoid(30.0) > 0.0);
    }

    #[test]
    fn loss_strictly_decreasing_in_margin() {
        let grid: Vec<f64> = (-200..=200).map(|i| f64::from(i) * 0.1).collect();
        for w in grid.windows(2) {
            assert!(neg_log_sigmoid(w[1]) < neg_log_sigmoid(w[0]), "at {}", w[0]);
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        for m in [-30.0, -2.0, -0.1, 0.0, 0.7, 12.0] {
            assert!((sigmoid(m) + sigmoid(-m) - 1.0).abs() < 1e-15);
        }
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { beta: 0.0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { delta: -0.5, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Usage(_))));
        }
    }
}
