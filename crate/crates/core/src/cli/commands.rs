use std::fs;
use std::path::{Path, PathBuf};

use super::{Command, RunConfig};
use crate::corpus::{gen_synthetic, inject_label_noise, load_jsonl, load_sft_jsonl, write_jsonl, write_sft_jsonl};
use crate::error::{Error, Result};
use crate::eval::{evaluate, REPORT_HEADER};
use crate::lm::{load_params_for, save_params};
use crate::sampler::{
    annotate, clarity_curve, curve_to_csv, curve_to_svg, delta_for_retention, filter, load_scored_jsonl,
    write_scored_jsonl,
};
use crate::seed::derive_seed;
use crate::train::{gradcheck, train_dpo, train_sft, EpochStats};

pub(super) fn execute(command: Command, cfg: &RunConfig, config_file: Option<&Path>) -> Result<()> {
    let run_dir = &cfg.run.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    echo_config(command, cfg, config_file)?;
    match command {
        Command::Gen => gen(cfg),
        Command::Sft => sft(cfg),
        Command::Score => score(cfg),
        Command::Sample => sample(cfg),
        Command::Analyze => analyze(cfg),
        Command::Dpo => dpo(cfg),
        Command::Eval => eval(cfg),
        Command::Gradcheck => grad_check(cfg),
    }
}

/// Path of the resolved-config echo for `command`.
pub fn resolved_config_path(cfg: &RunConfig, command: Command) -> PathBuf {
    cfg.run.run_dir.join(format!("{}.resolved.toml", command.name()))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn echo_config(command: Command, cfg: &RunConfig, config_file: Option<&Path>) -> Result<()> {
    let dest = resolved_config_path(cfg, command);
    if config_file.is_some_and(|src| same_file(src, &dest)) {
        log::info!("replaying {}; echo left untouched", dest.display());
        return Ok(());
    }
    let body = format!(
        "# resolved configuration of `prefgate {}`; replay with --config <this file>\n{}",
        command.name(),
        cfg.to_toml()?
    );
    write_text(&dest, &body)
}

/// Refuses to write any output over one of the inputs.
fn guard(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for out in outputs {
        if let Some(input) = inputs.iter().find(|i| same_file(i, out)) {
            return Err(Error::usage(format!(
                "output {} would overwrite input {}",
                out.display(),
                input.display()
            )));
        }
    }
    for out in outputs {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_epoch_log(path: &Path, header: &str, epochs: &[EpochStats]) -> Result<()> {
    let mut text = format!("{header}\n");
    for e in epochs {
        text.push_str(&e.log_line());
        text.push('\n');
    }
    write_text(path, &text)
}

fn gen(cfg: &RunConfig) -> Result<()> {
    let sft_path = cfg.artifact(&cfg.paths.sft_corpus);
    let train_path = cfg.artifact(&cfg.paths.train);
    let heldout_path = cfg.artifact(&cfg.paths.heldout);
    guard(&[], &[&sft_path, &train_path, &heldout_path])?;

    let (sft, dataset) = gen_synthetic(&cfg.synth_config(derive_seed(cfg.run.seed, "gen")))?;
    // held-out pairs are split off before noise and never filtered
    let (mut train, heldout) = dataset.split_heldout(cfg.corpus.heldout_fraction)?;
    if cfg.corpus.noise_flip_prob > 0.0 {
        train = inject_label_noise(
            &train,
            cfg.corpus.noise_cutoff,
            cfg.corpus.noise_flip_prob,
            derive_seed(cfg.run.seed, "noise"),
        )?;
    }
    write_sft_jsonl(&sft, &sft_path)?;
    write_jsonl(&train, &train_path)?;
    write_jsonl(&heldout, &heldout_path)?;
    println!("sft_corpus\t{}\t{}", sft.len(), sft_path.display());
    println!("train\t{}\t{}", train.len(), train_path.display());
    println!("heldout\t{}\t{}", heldout.len(), heldout_path.display());
    Ok(())
}

fn sft(cfg: &RunConfig) -> Result<()> {
    let corpus_path = cfg.artifact(&cfg.paths.sft_corpus);
    let ckpt = cfg.artifact(&cfg.paths.reference);
    let log_path = cfg.artifact(&cfg.paths.sft_log);
    guard(&[&corpus_path], &[&ckpt, &log_path])?;

    let corpus = load_sft_jsonl(&corpus_path)?;
    let outcome = train_sft(
        &cfg.sft_train_config(derive_seed(cfg.run.seed, "sft")),
        &cfg.lm.arch(),
        &corpus,
    )?;
    save_params(&outcome.params, &ckpt)?;
    write_epoch_log(&log_path, "epoch\tmean_loss", &outcome.epochs)?;
    println!("reference\t{}", ckpt.display());
    Ok(())
}

fn score(cfg: &RunConfig) -> Result<()> {
    let train_path = cfg.artifact(&cfg.paths.train);
    let ckpt = cfg.artifact(&cfg.paths.reference);
    let scored_path = cfg.artifact(&cfg.paths.scored);
    guard(&[&train_path, &ckpt], &[&scored_path])?;

    let dataset = load_jsonl(&train_path)?;
    let reference = load_params_for(&ckpt, &cfg.lm.arch())?;
    let scored = annotate(&dataset, &reference)?;
    write_scored_jsonl(&scored, &scored_path)?;
    println!("scored\t{}\t{}", scored.len(), scored_path.display());
    Ok(())
}

fn sample(cfg: &RunConfig) -> Result<()> {
    let scored_path = cfg.artifact(&cfg.paths.scored);
    let sampled_path = cfg.artifact(&cfg.paths.sampled);
    guard(&[&scored_path], &[&sampled_path])?;

    let scored = load_scored_jsonl(&scored_path)?;
    let delta = match cfg.sample.retain {
        Some(fraction) => delta_for_retention(&scored, fraction)?,
        None => cfg.sample.delta,
    };
    let kept = filter(&scored, delta)?;
    write_scored_jsonl(&kept, &sampled_path)?;
    log::info!("sample\tdelta = {delta}: kept {} of {}", kept.len(), scored.len());
    println!("sampled\t{}\t{}\tdelta={delta}", kept.len(), sampled_path.display());
    Ok(())
}

fn analyze(cfg: &RunConfig) -> Result<()> {
    let scored_path = cfg.artifact(&cfg.paths.scored);
    let csv_path = cfg.artifact(&cfg.paths.curve);
    let svg_path = cfg.artifact(&cfg.paths.curve_svg);
    guard(&[&scored_path], &[&csv_path, &svg_path])?;

    let scored = load_scored_jsonl(&scored_path)?;
    if cfg.analyze.deltas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::usage("--deltas must be in ascending order"));
    }
    let mut deltas = cfg.analyze.deltas.clone();
    for &fraction in &cfg.analyze.retain {
        deltas.push(delta_for_retention(&scored, fraction)?);
    }
    deltas.sort_by(f64::total_cmp);
    deltas.dedup();
    let rows = clarity_curve(&scored, &deltas)?;
    let csv = curve_to_csv(&rows);
    write_text(&csv_path, &csv)?;
    write_text(&svg_path, &curve_to_svg(&rows))?;
    print!("{csv}");
    Ok(())
}

fn dpo(cfg: &RunConfig) -> Result<()> {
    let data_path = cfg.artifact(&cfg.paths.dpo_data);
    let ckpt = cfg.artifact(&cfg.paths.reference);
    let policy_path = cfg.artifact(&cfg.paths.policy);
    let log_path = cfg.artifact(&cfg.paths.dpo_log);
    guard(&[&data_path, &ckpt], &[&policy_path, &log_path])?;

    let dataset = load_jsonl(&data_path)?;
    let reference = load_params_for(&ckpt, &cfg.lm.arch())?;
    let outcome = train_dpo(&cfg.dpo_train_config(derive_seed(cfg.run.seed, "dpo")), &dataset, &reference)?;
    save_params(&outcome.params, &policy_path)?;
    write_epoch_log(&log_path, "epoch\tmean_loss\tmean_margin", &outcome.epochs)?;
    println!("policy\t{}", policy_path.display());
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let heldout_path = cfg.artifact(&cfg.paths.heldout);
    let policy_path = cfg.artifact(&cfg.paths.policy);
    let ckpt = cfg.artifact(&cfg.paths.reference);
    let tsv_path = cfg.artifact(&cfg.paths.report);
    let text_path = cfg.artifact(&cfg.paths.report_text);
    guard(&[&heldout_path, &policy_path, &ckpt], &[&tsv_path, &text_path])?;

    let arch = cfg.lm.arch();
    let heldout = load_jsonl(&heldout_path)?;
    let policy = load_params_for(&policy_path, &arch)?;
    let reference = load_params_for(&ckpt, &arch)?;
    let report = evaluate(&policy, &reference, &heldout, cfg.dpo.beta)?;
    write_text(&tsv_path, &format!("{REPORT_HEADER}\n{}\n", report.to_tsv_line()))?;
    let block = report.to_kv_block();
    write_text(&text_path, &block)?;
    print!("{block}");
    Ok(())
}

fn grad_check(cfg: &RunConfig) -> Result<()> {
    let report_path = cfg.artifact(&cfg.paths.gradcheck_report);
    guard(&[], &[&report_path])?;
    let report = gradcheck(&cfg.gradcheck.arch(), derive_seed(cfg.run.seed, "gradcheck"))?;
    let text = report.to_text();
    write_text(&report_path, &text)?;
    print!("{text}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report.failing().map(|c| format!("{} {}", c.objective, c.tensor)).collect();
        Err(Error::Numeric(format!(
            "gradient check failed (max relative error {:.3e}) in: {}",
            report.max_rel_err(),
            names.join(", ")
        )))
    }
}
