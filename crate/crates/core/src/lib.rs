//! Reference-model-guided sampling of preference pairs, with a desk-scale
//! DPO pipeline to exercise it end to end.
//!
//! The pipeline: generate a synthetic preference corpus with known quality
//! scores ([`corpus`]), fine-tune a tiny byte-level causal LM as the
//! reference ([`train::train_sft`]), score every pair under the reference
//! and keep those whose length-normalized log-probability gap reaches a
//! threshold ([`sampler`]), train a policy with DPO on the retained pairs
//! ([`train::train_dpo`]) and measure held-out preference accuracy
//! ([`eval`]).

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lm;
pub mod sampler;
pub mod seed;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
