use rayon::prelude::*;

use super::{neg_log_sigmoid, sigmoid, sum_in_order};
use crate::corpus::PreferencePair;
use crate::error::{Error, Result};
use crate::lm::{
    backward, ensure_same_arch, forward_cached, layout_for, model::weighted_logprob_grad, scored_targets,
    sequence_logprob, ModelParams, NormalizedScore,
};
use crate::tokenizer::ScoringLayout;

/// A pair tokenized once, with its frozen reference log-probabilities.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub chosen: ScoringLayout,
    pub rejected: ScoringLayout,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl PreparedPair {
    /// Length-normalized reference scores of both sides.
    pub fn reference_scores(&self) -> (NormalizedScore, NormalizedScore) {
        (
            NormalizedScore::new(self.ref_chosen, self.chosen.response_len),
            NormalizedScore::new(self.ref_rejected, self.rejected.response_len),
        )
    }
}

pub fn prepare_pairs(reference: &ModelParams, pairs: &[PreferencePair]) -> Result<Vec<PreparedPair>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(idx, pair)| {
            let prepare = || -> Result<PreparedPair> {
                let chosen = layout_for(reference, pair.prompt.as_bytes(), pair.chosen.as_bytes())?;
                let rejected = layout_for(reference, pair.prompt.as_bytes(), pair.rejected.as_bytes())?;
                Ok(PreparedPair {
                    ref_chosen: sequence_logprob(reference, &chosen)?,
                    ref_rejected: sequence_logprob(reference, &rejected)?,
                    chosen,
                    rejected,
                })
            };
            prepare().map_err(|e| match e {
                Error::Data(msg) => Error::data(format!("pair {idx}: {msg}")),
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DpoBatchResult {
    /// Mean of `-ln σ(m)` over the batch.
    pub loss: f64,
    /// `β·[(log πθ(y_w) − log πref(y_w)) − (log πθ(y_l) − log πref(y_l))]`
    /// per pair, from unnormalized log-probability sums.
    pub margins: Vec<f64>,
    pub grads: ModelParams,
}

/// Per-pair DPO loss as a function of the margin.
pub fn dpo_pair_loss(margin: f64) -> f64 {
    neg_log_sigmoid(margin)
}

/// Mean DPO loss over prepared pairs, without gradients.
pub fn dpo_loss(policy: &ModelParams, batch: &[PreparedPair], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("DPO batch is empty"));
    }
    let losses = batch
        .par_iter()
        .map(|pair| {
            let logp_w = sequence_logprob(policy, &pair.chosen)?;
            let logp_l = sequence_logprob(policy, &pair.rejected)?;
            Ok(dpo_pair_loss(
                beta * ((logp_w - pair.ref_chosen) - (logp_l - pair.ref_rejected)),
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// DPO loss and policy gradient over prepared pairs.
pub(crate) fn dpo_batch(policy: &ModelParams, batch: &[&PreparedPair], beta: f64) -> Result<DpoBatchResult> {
    if batch.is_empty() {
        return Err(Error::usage("DPO batch is empty"));
    }
    let n = batch.len() as f64;
    let vocab = policy.arch.vocab;
    let parts = batch
        .par_iter()
        .map(|pair| {
            let cache_w = forward_cached(policy, &pair.chosen.ids)?;
            let cache_l = forward_cached(policy, &pair.rejected.ids)?;
            // dL/dm = -σ(-m); the chain rule through m gives ±β on each side.
            let probe = |cache, layout, w| weighted_logprob_grad(cache, vocab, scored_targets(layout), w);
            let (logp_w, _) = probe(&cache_w, &pair.chosen, 0.0);
            let (logp_l, _) = probe(&cache_l, &pair.rejected, 0.0);
            let margin = beta * ((logp_w - pair.ref_chosen) - (logp_l - pair.ref_rejected));
            let coeff = sigmoid(-margin) * beta / n;
            let (_, d_w) = probe(&cache_w, &pair.chosen, -coeff);
            let (_, d_l) = probe(&cache_l, &pair.rejected, coeff);
            let mut grads = policy.zeros_like();
            backward(policy, &cache_w, &d_w, &mut grads);
            backward(policy, &cache_l, &d_l, &mut grads);
            Ok((margin, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let margins: Vec<f64> = parts.iter().map(|(m, _)| *m).collect();
    let loss = margins.iter().map(|&m| dpo_pair_loss(m)).sum::<f64>() / n;
    let grads = sum_in_order(parts.into_iter().map(|(_, g)| g).collect()).expect("non-empty batch");
    Ok(DpoBatchResult { loss, margins, grads })
}

/// DPO objective of `policy` against the frozen `reference` on `batch`.
/// Only the policy receives a gradient.
pub fn dpo_loss_and_grad(
    policy: &ModelParams,
    reference: &ModelParams,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<DpoBatchResult> {
    ensure_same_arch(policy, reference)?;
    if batch.is_empty() {
        return Err(Error::usage("DPO batch is empty"));
    }
    let prepared = prepare_pairs(reference, batch)?;
    let refs: Vec<&PreparedPair> = prepared.iter().collect();
    dpo_batch(policy, &refs, beta)
}
