//! Held-out preference accuracy from implicit-reward margins.
//!
//! A pair counts as a win when the policy's implicit reward margin over the
//! reference is positive, a tie when it is exactly zero. Ties score half, so
//! an untrained policy (policy = reference) sits at exactly 0.5.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::corpus::{Dataset, PreferencePair};
use crate::error::{Error, Result};
use crate::lm::{ensure_same_arch, layout_for, sequence_logprob, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub accuracy: f64,
    pub mean_margin: f64,
    pub tie_count: usize,
}

pub const REPORT_HEADER: &str = "n_pairs\taccuracy\tmean_margin\ttie_count";

impl EvalReport {
    /// `n_pairs  accuracy  mean_margin  tie_count`, tab-separated, no newline.
    pub fn to_tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.n_pairs, self.accuracy, self.mean_margin, self.tie_count
        )
    }

    pub fn to_kv_block(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n_pairs = {}", self.n_pairs);
        let _ = writeln!(out, "accuracy = {}", self.accuracy);
        let _ = writeln!(out, "mean_margin = {}", self.mean_margin);
        let _ = writeln!(out, "tie_count = {}", self.tie_count);
        out
    }
}

/// `β·[(log πθ(y_w) − log πref(y_w)) − (log πθ(y_l) − log πref(y_l))]` with
/// unnormalized log-probability sums.
pub fn implicit_reward_margin(
    policy: &ModelParams,
    reference: &ModelParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    ensure_same_arch(policy, reference)?;
    let chosen = layout_for(policy, pair.prompt.as_bytes(), pair.chosen.as_bytes())?;
    let rejected = layout_for(policy, pair.prompt.as_bytes(), pair.rejected.as_bytes())?;
    let ratio_w = sequence_logprob(policy, &chosen)? - sequence_logprob(reference, &chosen)?;
    let ratio_l = sequence_logprob(policy, &rejected)? - sequence_logprob(reference, &rejected)?;
    Ok(beta * (ratio_w - ratio_l))
}

pub fn evaluate(
    policy: &ModelParams,
    reference: &ModelParams,
    heldout: &Dataset,
    beta: f64,
) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::usage("held-out set is empty"));
    }
    let margins = heldout
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            implicit_reward_margin(policy, reference, pair, beta).map_err(|e| match e {
                Error::Data(msg) => Error::data(format!("pair {i}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let wins = margins.iter().filter(|&&m| m > 0.0).count();
    let ties = margins.iter().filter(|&&m| m == 0.0).count();
    let n = margins.len();
    Ok(EvalReport {
        n_pairs: n,
        accuracy: (wins as f64 + 0.5 * ties as f64) / n as f64,
        mean_margin: margins.iter().sum::<f64>() / n as f64,
        tie_count: ties,
    })
}
