//! Tiny causal language model used both as the frozen reference and as the
//! policy being optimized.

mod io;
pub mod model;
mod params;

pub use io::{load_params, load_params_for, read_params, save_params, write_params, FORMAT_VERSION, MAGIC};
pub use model::{backward, forward, forward_cached, log_softmax, softmax, ForwardCache};
pub use params::{init_params, ArchConfig, LayerParams, ModelParams, Tensor, INIT_RANGE};

use crate::error::{Error, Result};
use crate::tokenizer::{build_sequence, ScoringLayout};

/// Length-normalized log-probability of a response given its prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedScore {
    pub logp_sum: f64,
    pub length: usize,
    pub logp_norm: f64,
}

impl NormalizedScore {
    pub fn new(logp_sum: f64, length: usize) -> Self {
        NormalizedScore {
            logp_sum,
            length,
            logp_norm: logp_sum / length as f64,
        }
    }
}

/// `(logits row, target id)` for every scored token of the layout.
pub fn scored_targets(layout: &ScoringLayout) -> impl Iterator<Item = (usize, usize)> + '_ {
    layout
        .response_span
        .clone()
        .map(move |pos| (pos - 1, usize::from(layout.ids[pos])))
}

/// Unnormalized `log π(y|x)` summed over the response span.
pub fn sequence_logprob(params: &ModelParams, layout: &ScoringLayout) -> Result<f64> {
    let cache = forward_cached(params, &layout.ids)?;
    let vocab = params.arch.vocab;
    Ok(scored_targets(layout)
        .map(|(row, target)| log_softmax(cache.logits_row(row, vocab))[target])
        .sum())
}

/// `log π(y|x)` together with its gradient with respect to every parameter.
pub fn sequence_logprob_grad(params: &ModelParams, layout: &ScoringLayout) -> Result<(f64, ModelParams)> {
    let cache = forward_cached(params, &layout.ids)?;
    let (logp, dlogits) =
        model::weighted_logprob_grad(&cache, params.arch.vocab, scored_targets(layout), 1.0);
    let mut grads = params.zeros_like();
    backward(params, &cache, &dlogits, &mut grads);
    Ok((logp, grads))
}

pub fn layout_for(params: &ModelParams, prompt: &[u8], response: &[u8]) -> Result<ScoringLayout> {
    build_sequence(prompt, response, params.arch.max_len)
}

pub fn score_response(params: &ModelParams, prompt: &[u8], response: &[u8]) -> Result<NormalizedScore> {
    let layout = layout_for(params, prompt, response)?;
    let logp_sum = sequence_logprob(params, &layout)?;
    Ok(NormalizedScore::new(logp_sum, layout.response_len))
}

pub(crate) fn ensure_same_arch(a: &ModelParams, b: &ModelParams) -> Result<()> {
    if a.arch != b.arch {
        return Err(Error::usage(format!(
            "policy and reference architectures differ: {:?} vs {:?}",
            a.arch, b.arch
        )));
    }
    Ok(())
}
