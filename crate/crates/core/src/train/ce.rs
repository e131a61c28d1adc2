use rayon::prelude::*;

use super::sum_in_order;
use crate::error::{Error, Result};
use crate::lm::{backward, forward_cached, log_softmax, model::weighted_logprob_grad, ModelParams};
use crate::tokenizer::ScoringLayout;

/// Mean next-token negative log-likelihood of the batch, without gradients.
pub fn ce_loss(params: &ModelParams, batch: &[ScoringLayout]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("cross-entropy batch is empty"));
    }
    let vocab = params.arch.vocab;
    let parts = batch
        .par_iter()
        .map(|layout| {
            let cache = forward_cached(params, &layout.ids)?;
            Ok((0..layout.ids.len() - 1)
                .map(|r| log_softmax(cache.logits_row(r, vocab))[usize::from(layout.ids[r + 1])])
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let predicted: usize = batch.iter().map(|l| l.ids.len().saturating_sub(1)).sum();
    Ok(-parts.iter().sum::<f64>() / predicted as f64)
}

/// Mean next-token negative log-likelihood over every predicted position of
/// the batch (all tokens after BOS), and its exact gradient.
pub fn ce_loss_and_grad(params: &ModelParams, batch: &[ScoringLayout]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::usage("cross-entropy batch is empty"));
    }
    let predicted: usize = batch.iter().map(|l| l.ids.len().saturating_sub(1)).sum();
    if predicted == 0 {
        return Err(Error::usage("batch has no predicted positions"));
    }
    let weight = -1.0 / predicted as f64;
    let vocab = params.arch.vocab;

    let parts = batch
        .par_iter()
        .map(|layout| {
            let cache = forward_cached(params, &layout.ids)?;
            let targets = (0..layout.ids.len() - 1).map(|r| (r, usize::from(layout.ids[r + 1])));
            let (logp, dlogits) = weighted_logprob_grad(&cache, vocab, targets, weight);
            let mut grads = params.zeros_like();
            backward(params, &cache, &dlogits, &mut grads);
            Ok((logp, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let total_logp: f64 = parts.iter().map(|(lp, _)| lp).sum();
    let grads = sum_in_order(parts.into_iter().map(|(_, g)| g).collect()).expect("non-empty batch");
    Ok((-total_logp / predicted as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_params, ArchConfig};
    use crate::tokenizer::build_sequence;

    fn small() -> ArchConfig {
        ArchConfig {
            d_model: 8,
            ffn_hidden: 16,
            max_len: 64,
            ..ArchConfig::default()
        }
    }

    fn batch() -> Vec<ScoringLayout> {
        vec![
            build_sequence(b"abcdefgh", b"ijkl", 64).unwrap(),
            build_sequence(b"zz", b"yyyyyy", 64).unwrap(),
        ]
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let params = ModelParams::uniform(&small());
        let (loss, _) = ce_loss_and_grad(&params, &batch()).unwrap();
        assert!((loss - 260f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_only_path_agrees() {
        let params = init_params(&small(), 1).unwrap();
        let (loss, _) = ce_loss_and_grad(&params, &batch()).unwrap();
        assert!((ce_loss(&params, &batch()).unwrap() - loss).abs() < 1e-14);
    }

    #[test]
    fn duplicated_batch_keeps_loss() {
        let params = init_params(&small(), 1).unwrap();
        let (loss, grads) = ce_loss_and_grad(&params, &batch()).unwrap();
        let doubled: Vec<_> = batch().into_iter().chain(batch()).collect();
        let (loss2, grads2) = ce_loss_and_grad(&params, &doubled).unwrap();
        assert!((loss - loss2).abs() < 1e-14);
        let mut diff = grads2.clone();
        diff.add_scaled(&grads, -1.0);
        assert!(diff.sq_norm().sqrt() < 1e-12 * grads.sq_norm().sqrt().max(1.0));
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let params = init_params(&small(), 1).unwrap();
        assert!(matches!(ce_loss_and_grad(&params, &[]), Err(Error::Usage(_))));
    }
}
