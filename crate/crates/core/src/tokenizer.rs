//! Byte-level tokenizer and the fixed sequence layout used for scoring and
//! training.
//!
//! Ids `0..=255` are raw bytes; four special ids follow. A scoring layout is
//! always `[BOS] prompt [SEP] response [EOS]`, and the scored span covers the
//! response bytes plus the terminating EOS, so `|y| = response bytes + 1`.

use std::ops::Range;

use crate::error::{Error, Result};

pub type TokenId = u16;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const SEP: TokenId = 258;
pub const PAD: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;
pub const DEFAULT_MAX_LEN: usize = 256;

pub fn encode(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| TokenId::from(b)).collect()
}

pub fn decode(ids: &[TokenId]) -> Result<Vec<u8>> {
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            u8::try_from(id)
                .map_err(|_| Error::data(format!("cannot decode special token {id} at index {i}")))
        })
        .collect()
}

/// A tokenized `(prompt, response)` pair with the positions whose
/// log-probabilities make up `log π(y|x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoringLayout {
    pub ids: Vec<TokenId>,
    /// Indices into `ids` of the scored tokens (response bytes and EOS).
    pub response_span: Range<usize>,
    pub response_len: usize,
}

impl ScoringLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Total token count of the layout for the given byte lengths.
pub fn layout_len(prompt_len: usize, response_len: usize) -> usize {
    prompt_len + response_len + 3
}

pub fn build_sequence(prompt: &[u8], response: &[u8], max_len: usize) -> Result<ScoringLayout> {
    if response.is_empty() {
        return Err(Error::data("response must be non-empty"));
    }
    let required = layout_len(prompt.len(), response.len());
    if required > max_len {
        return Err(Error::data(format!(
            "sequence needs {required} tokens but only {max_len} are available"
        )));
    }
    let mut ids = Vec::with_capacity(required);
    ids.push(BOS);
    ids.extend(encode(prompt));
    ids.push(SEP);
    let start = ids.len();
    ids.extend(encode(response));
    ids.push(EOS);
    let end = ids.len();
    Ok(ScoringLayout {
        ids,
        response_span: start..end,
        response_len: end - start,
    })
}
