//! Central finite-difference verification of the analytic CE and DPO
//! gradients, coordinate by coordinate.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{ce_loss, ce_loss_and_grad, dpo_loss, dpo_loss_and_grad, prepare_pairs};
use crate::corpus::{gen_synthetic, SynthConfig};
use crate::error::{Error, Result};
use crate::lm::{init_params, ArchConfig, ModelParams};
use crate::seed::derive_seed;
use crate::tokenizer::{build_sequence, ScoringLayout};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry ~1e-10 of cancellation noise at this step, so gradients below
/// the floor are compared in absolute terms (1e-9 at the tolerance).
pub const REL_FLOOR: f64 = 1e-4;
/// Weights of the checked models are spread to `(-0.5, 0.5)`; at the
/// training init most gradients sit near the finite-difference noise floor.
pub const GRADCHECK_WEIGHT_SCALE: f64 = 25.0;
/// DPO temperature used for the check. Larger than the training default so
/// the DPO gradient is not dwarfed by finite-difference noise.
pub const GRADCHECK_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub objective: &'static str,
    pub tensor: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    pub fn failing(&self) -> impl Iterator<Item = &TensorCheck> {
        self.checks.iter().filter(|c| c.max_rel_err >= self.tolerance)
    }

    /// One tab-separated line per tensor, then a verdict line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("objective\ttensor\tmax_rel_err\tworst_index\tanalytic\tnumeric\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.3e}\t{}\t{:.6e}\t{:.6e}",
                c.objective, c.tensor, c.max_rel_err, c.worst_index, c.analytic, c.numeric
            );
        }
        let _ = writeln!(
            out,
            "{}\tmax_rel_err={:.3e}\ttolerance={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        );
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` over every
/// coordinate of every tensor of `params`.
pub fn check_gradients<F>(
    objective: &'static str,
    params: &ModelParams,
    analytic: &ModelParams,
    loss: F,
    step: f64,
) -> Vec<TensorCheck>
where
    F: Fn(&ModelParams) -> f64 + Sync,
{
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic_tensors = analytic.tensors();
    names
        .par_iter()
        .enumerate()
        .map(|(ti, name)| {
            let mut probe = params.clone();
            let expected = &analytic_tensors[ti].1.data;
            let mut worst = (0.0, 0, 0.0, 0.0);
            for i in 0..expected.len() {
                let original = probe.tensors()[ti].1.data[i];
                let set = |p: &mut ModelParams, v: f64| {
                    p.tensors_mut()[ti].1.data[i] = v;
                };
                set(&mut probe, original + step);
                let plus = loss(&probe);
                set(&mut probe, original - step);
                let minus = loss(&probe);
                set(&mut probe, original);
                let numeric = (plus - minus) / (2.0 * step);
                let err = relative_error(expected[i], numeric);
                if err > worst.0 || i == 0 {
                    worst = (err, i, expected[i], numeric);
                }
            }
            TensorCheck {
                objective,
                tensor: name.clone(),
                max_rel_err: worst.0,
                worst_index: worst.1,
                analytic: worst.2,
                numeric: worst.3,
            }
        })
        .collect()
}

fn fixtures(arch: &ArchConfig, seed: u64) -> Result<(Vec<ScoringLayout>, Vec<crate::corpus::PreferencePair>)> {
    let (sft, ds) = gen_synthetic(&SynthConfig {
        n_pairs: 2,
        n_sft_sequences: 3,
        response_len_min: 4,
        response_len_max: 8,
        paired_lengths: false,
        seed: derive_seed(seed, "gradcheck/data"),
    })?;
    let layouts = sft
        .iter()
        .map(|ex| build_sequence(ex.prompt.as_bytes(), ex.response.as_bytes(), arch.max_len))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::usage(format!("gradcheck fixtures do not fit the architecture: {e}")))?;
    Ok((layouts, ds.pairs))
}

fn spread(mut params: ModelParams) -> ModelParams {
    for (name, t) in params.tensors_mut() {
        if !name.ends_with(".gain") {
            t.data.iter_mut().for_each(|v| *v *= GRADCHECK_WEIGHT_SCALE);
        }
    }
    params
}

/// Runs the finite-difference check for both objectives on freshly
/// initialized policy/reference models.
pub fn gradcheck(arch: &ArchConfig, seed: u64) -> Result<GradcheckReport> {
    arch.validate()?;
    let policy = spread(init_params(arch, derive_seed(seed, "gradcheck/policy"))?);
    let reference = spread(init_params(arch, derive_seed(seed, "gradcheck/reference"))?);
    let (layouts, pairs) = fixtures(arch, seed)?;

    let (_, ce_grads) = ce_loss_and_grad(&policy, &layouts)?;
    let mut checks = check_gradients(
        "ce",
        &policy,
        &ce_grads,
        |p| ce_loss(p, &layouts).expect("fixtures validated"),
        FD_STEP,
    );

    let dpo = dpo_loss_and_grad(&policy, &reference, &pairs, GRADCHECK_BETA)?;
    let prepared = prepare_pairs(&reference, &pairs)?;
    checks.extend(check_gradients(
        "dpo",
        &policy,
        &dpo.grads,
        |p| dpo_loss(p, &prepared, GRADCHECK_BETA).expect("fixtures validated"),
        FD_STEP,
    ));
    Ok(GradcheckReport {
        checks,
        tolerance: REL_TOLERANCE,
    })
}
