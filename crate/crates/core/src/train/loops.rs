use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dpo::{dpo_batch, prepare_pairs, PreparedPair};
use super::{adam_step, ce_loss_and_grad, OptimizerState, TrainConfig};
use crate::corpus::{Dataset, SftExample};
use crate::error::{Error, Result};
use crate::lm::{init_params, ArchConfig, ModelParams};
use crate::seed::derive_seed;
use crate::tokenizer::{build_sequence, ScoringLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// DPO only: mean implicit-reward margin over the epoch's pairs.
    pub mean_margin: Option<f64>,
}

impl EpochStats {
    /// Tab-separated log line: `epoch, mean_loss[, mean_margin]`.
    pub fn log_line(&self) -> String {
        match self.mean_margin {
            Some(m) => format!("{}\t{}\t{}", self.epoch, self.mean_loss, m),
            None => format!("{}\t{}", self.epoch, self.mean_loss),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochStats>,
    /// Loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Next-token cross-entropy training from a fresh initialization; produces
/// the reference model.
pub fn train_sft(cfg: &TrainConfig, arch: &ArchConfig, corpus: &[SftExample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if corpus.is_empty() {
        return Err(Error::usage("SFT corpus is empty"));
    }
    let layouts = corpus
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            build_sequence(ex.prompt.as_bytes(), ex.response.as_bytes(), arch.max_len)
                .map_err(|e| Error::data(format!("SFT example {i}: {e}")))
        })
        .collect::<Result<Vec<ScoringLayout>>>()?;

    let mut params = init_params(arch, derive_seed(cfg.seed, "sft/init"))?;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sft/shuffle"));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let order = shuffled(&mut rng, layouts.len());
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ScoringLayout> = chunk.iter().map(|&i| layouts[i].clone()).collect();
            let (loss, grads) = ce_loss_and_grad(&params, &batch)?;
            adam_step(&mut state, &mut params, &grads, cfg)?;
            losses.push(loss);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            mean_margin: None,
        };
        log::info!("sft\t{}", stats.log_line());
        epochs.push(stats);
        batch_losses.extend(losses);
    }
    Ok(TrainOutcome {
        params,
        epochs,
        batch_losses,
    })
}

/// Retains prepared pairs whose reference gap reaches `delta`.
fn apply_threshold(prepared: Vec<PreparedPair>, delta: f64) -> Vec<PreparedPair> {
    if delta == 0.0 {
        return prepared;
    }
    prepared
        .into_iter()
        .filter(|p| {
            let (c, r) = p.reference_scores();
            (c.logp_norm - r.logp_norm).abs() >= delta
        })
        .collect()
}

/// DPO from a copy of `reference`, which stays frozen. Pairs whose reference
/// gap is below `cfg.delta` are dropped before training.
pub fn train_dpo(cfg: &TrainConfig, dataset: &Dataset, reference: &ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::usage("DPO dataset is empty"));
    }
    let prepared = apply_threshold(prepare_pairs(reference, &dataset.pairs)?, cfg.delta);
    if prepared.is_empty() {
        return Err(Error::data(format!("no pairs reach delta = {}", cfg.delta)));
    }
    log::info!("dpo\ttraining on {} of {} pairs", prepared.len(), dataset.len());

    let mut policy = reference.clone();
    let mut state = OptimizerState::new(&policy);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dpo/shuffle"));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let order = shuffled(&mut rng, prepared.len());
        let mut loss_sum = 0.0;
        let mut margin_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedPair> = chunk.iter().map(|&i| &prepared[i]).collect();
            let result = dpo_batch(&policy, &batch, cfg.beta)?;
            adam_step(&mut state, &mut policy, &result.grads, cfg)?;
            loss_sum += result.loss * batch.len() as f64;
            margin_sum += result.margins.iter().sum::<f64>();
            batch_losses.push(result.loss);
        }
        let n = prepared.len() as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            mean_margin: Some(margin_sum / n),
        };
        log::info!("dpo\t{}", stats.log_line());
        epochs.push(stats);
    }
    Ok(TrainOutcome {
        params: policy,
        epochs,
        batch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SynthConfig};
    use std::f64::consts::LN_2;

    fn small() -> ArchConfig {
        ArchConfig {
            d_model: 8,
            ffn_hidden: 16,
            max_len: 64,
            ..ArchConfig::default()
        }
    }

    fn data() -> (Vec<SftExample>, Dataset) {
        gen_synthetic(&SynthConfig {
            n_pairs: 24,
            n_sft_sequences: 48,
            response_len_min: 6,
            response_len_max: 12,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (sft, _) = data();
        let c = TrainConfig { epochs: 0, ..cfg() };
        let out = train_sft(&c, &small(), &sft).unwrap();
        assert_eq!(out.params, init_params(&small(), derive_seed(c.seed, "sft/init")).unwrap());
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn sft_is_deterministic_and_learns() {
        let (sft, _) = data();
        let a = train_sft(&cfg(), &small(), &sft).unwrap();
        let b = train_sft(&cfg(), &small(), &sft).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.epochs[1].mean_loss < a.epochs[0].mean_loss);
    }

    #[test]
    fn overlength_sft_example() {
        let long = SftExample {
            prompt: "a".into(),
            response: "b".repeat(80),
        };
        assert!(matches!(
            train_sft(&cfg(), &small(), &[long]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dpo_starts_at_ln2_and_keeps_reference() {
        let (sft, ds) = data();
        let reference = train_sft(&cfg(), &small(), &sft).unwrap().params;
        let frozen = reference.clone();
        let out = train_dpo(&cfg(), &ds, &reference).unwrap();
        assert!((out.batch_losses[0] - LN_2).abs() < 1e-9);
        assert_eq!(reference, frozen);
        assert_ne!(out.params, reference);
        let again = train_dpo(&cfg(), &ds, &reference).unwrap();
        assert_eq!(out.params, again.params);
        assert_eq!(out.epochs.len(), 2);
        assert!(out.epochs[0].mean_margin.is_some());
    }

    #[test]
    fn dpo_threshold_beyond_every_gap() {
        let (sft, ds) = data();
        let reference = train_sft(&cfg(), &small(), &sft).unwrap().params;
        let c = TrainConfig { delta: 1e6, ..cfg() };
        assert!(matches!(train_dpo(&c, &ds, &reference), Err(Error::Data(_))));
    }

    #[test]
    fn log_line_format() {
        let s = EpochStats {
            epoch: 2,
            mean_loss: 0.5,
            mean_margin: Some(0.25),
        };
        assert_eq!(s.log_line(), "2\t0.5\t0.25");
    }
}
