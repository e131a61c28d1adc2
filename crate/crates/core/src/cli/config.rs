//! Run configuration: TOML file, then `PREFGATE_SEED`, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::lm::ArchConfig;
use crate::sampler::DEFAULT_DELTAS;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "PREFGATE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub run_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_pairs: usize,
    pub n_sft_sequences: usize,
    pub response_len_min: usize,
    pub response_len_max: usize,
    pub paired_lengths: bool,
    pub heldout_fraction: f64,
    /// Pairs with clarity below this are candidates for label flips.
    pub noise_cutoff: f64,
    /// 0 disables noise injection.
    pub noise_flip_prob: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let synth = SynthConfig::default();
        CorpusSection {
            n_pairs: synth.n_pairs,
            n_sft_sequences: synth.n_sft_sequences,
            response_len_min: synth.response_len_min,
            response_len_max: synth.response_len_max,
            paired_lengths: synth.paired_lengths,
            heldout_fraction: 0.1,
            noise_cutoff: 0.0,
            noise_flip_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl LmSection {
    fn from_arch(arch: &ArchConfig) -> Self {
        LmSection {
            d_model: arch.d_model,
            n_heads: arch.n_heads,
            ffn_hidden: arch.ffn_hidden,
            n_layers: arch.n_layers,
            max_len: arch.max_len,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            n_layers: self.n_layers,
            max_len: self.max_len,
            ..ArchConfig::default()
        }
    }
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection::from_arch(&ArchConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
}

impl Default for SftSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        SftSection {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            grad_clip_norm: t.grad_clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoSection {
    /// Also the β used by `eval`.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    /// Threshold applied on top of whatever data `dpo` is given.
    pub delta: f64,
}

impl Default for DpoSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        DpoSection {
            beta: t.beta,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            grad_clip_norm: t.grad_clip_norm,
            delta: t.delta,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub delta: f64,
    /// When set, δ is chosen so this fraction of pairs survives; wins over `delta`.
    pub retain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub deltas: Vec<f64>,
    /// Retention fractions whose thresholds are merged into the grid.
    pub retain: Vec<f64>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            deltas: DEFAULT_DELTAS.to_vec(),
            retain: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl GradcheckSection {
    pub fn arch(&self) -> ArchConfig {
        LmSection {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            n_layers: self.n_layers,
            max_len: self.max_len,
        }
        .arch()
    }
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            d_model: 8,
            n_heads: 2,
            ffn_hidden: 16,
            n_layers: 1,
            max_len: 32,
        }
    }
}

/// Artifact locations; relative paths resolve against `run.run_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub sft_corpus: PathBuf,
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub reference: PathBuf,
    pub sft_log: PathBuf,
    pub scored: PathBuf,
    pub sampled: PathBuf,
    pub curve: PathBuf,
    pub curve_svg: PathBuf,
    /// Training data for `dpo`.
    pub dpo_data: PathBuf,
    pub policy: PathBuf,
    pub dpo_log: PathBuf,
    pub report: PathBuf,
    pub report_text: PathBuf,
    pub gradcheck_report: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            sft_corpus: "sft_corpus.jsonl".into(),
            train: "train.jsonl".into(),
            heldout: "heldout.jsonl".into(),
            reference: "reference.ckpt".into(),
            sft_log: "sft_log.tsv".into(),
            scored: "scored.jsonl".into(),
            sampled: "sampled.jsonl".into(),
            curve: "curve.csv".into(),
            curve_svg: "curve.svg".into(),
            dpo_data: "sampled.jsonl".into(),
            policy: "policy.ckpt".into(),
            dpo_log: "dpo_log.tsv".into(),
            report: "report.tsv".into(),
            report_text: "report.txt".into(),
            gradcheck_report: "gradcheck.txt".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub lm: LmSection,
    pub sft: SftSection,
    pub dpo: DpoSection,
    pub sample: SampleSection,
    pub analyze: AnalyzeSection,
    pub gradcheck: GradcheckSection,
    pub paths: PathsSection,
}

/// One flag per config key. Unset flags leave the file value alone.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// TOML config file; missing keys take defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, help_heading = "run")]
    pub seed: Option<u64>,
    #[arg(long, global = true, help_heading = "run", value_name = "DIR")]
    pub run_dir: Option<PathBuf>,

    #[arg(long, global = true, help_heading = "corpus")]
    pub n_pairs: Option<usize>,
    #[arg(long, global = true, help_heading = "corpus")]
    pub n_sft_sequences: Option<usize>,
    #[arg(long, global = true, help_heading = "corpus")]
    pub response_len_min: Option<usize>,
    #[arg(long, global = true, help_heading = "corpus")]
    pub response_len_max: Option<usize>,
    #[arg(long, global = true, help_heading = "corpus", value_name = "BOOL")]
    pub paired_lengths: Option<bool>,
    #[arg(long, global = true, help_heading = "corpus")]
    pub heldout_fraction: Option<f64>,
    #[arg(long, global = true, help_heading = "corpus")]
    pub noise_cutoff: Option<f64>,
    #[arg(long, global = true, help_heading = "corpus")]
    pub noise_flip_prob: Option<f64>,

    #[arg(long, global = true, help_heading = "lm")]
    pub d_model: Option<usize>,
    #[arg(long, global = true, help_heading = "lm")]
    pub n_heads: Option<usize>,
    #[arg(long, global = true, help_heading = "lm")]
    pub ffn_hidden: Option<usize>,
    #[arg(long, global = true, help_heading = "lm")]
    pub n_layers: Option<usize>,
    #[arg(long, global = true, help_heading = "lm")]
    pub max_len: Option<usize>,

    #[arg(long, global = true, help_heading = "sft")]
    pub sft_lr: Option<f64>,
    #[arg(long, global = true, help_heading = "sft")]
    pub sft_epochs: Option<usize>,
    #[arg(long, global = true, help_heading = "sft")]
    pub sft_batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "sft")]
    pub sft_clip: Option<f64>,

    #[arg(long, global = true, help_heading = "dpo")]
    pub beta: Option<f64>,
    #[arg(long, global = true, help_heading = "dpo")]
    pub dpo_lr: Option<f64>,
    #[arg(long, global = true, help_heading = "dpo")]
    pub dpo_epochs: Option<usize>,
    #[arg(long, global = true, help_heading = "dpo")]
    pub dpo_batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "dpo")]
    pub dpo_clip: Option<f64>,
    #[arg(long, global = true, help_heading = "dpo")]
    pub dpo_delta: Option<f64>,

    /// Sampling threshold for `sample`.
    #[arg(long, global = true, help_heading = "sample")]
    pub delta: Option<f64>,
    /// Fraction of pairs `sample` keeps; overrides --delta.
    #[arg(long, global = true, help_heading = "sample")]
    pub retain: Option<f64>,

    /// Comma-separated ascending threshold grid for `analyze`.
    #[arg(long, global = true, help_heading = "analyze", value_delimiter = ',', num_args = 1..)]
    pub deltas: Option<Vec<f64>>,
    /// Comma-separated retention fractions whose thresholds join the grid.
    #[arg(long, global = true, help_heading = "analyze", value_delimiter = ',', num_args = 1..)]
    pub analyze_retain: Option<Vec<f64>>,

    #[arg(long, global = true, help_heading = "gradcheck")]
    pub gradcheck_d_model: Option<usize>,
    #[arg(long, global = true, help_heading = "gradcheck")]
    pub gradcheck_n_heads: Option<usize>,
    #[arg(long, global = true, help_heading = "gradcheck")]
    pub gradcheck_ffn_hidden: Option<usize>,
    #[arg(long, global = true, help_heading = "gradcheck")]
    pub gradcheck_n_layers: Option<usize>,
    #[arg(long, global = true, help_heading = "gradcheck")]
    pub gradcheck_max_len: Option<usize>,

    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub sft_corpus: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub heldout: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub reference: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub sft_log: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub scored: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub sampled: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub curve: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub curve_svg: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub dpo_data: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub policy: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub dpo_log: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub report_text: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "paths", value_name = "PATH")]
    pub gradcheck_report: Option<PathBuf>,
}

macro_rules! override_with {
    ($($dst:expr => $src:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v; })*
    };
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        override_with! {
            cfg.run.seed => self.seed,
            cfg.run.run_dir => self.run_dir,
            cfg.corpus.n_pairs => self.n_pairs,
            cfg.corpus.n_sft_sequences => self.n_sft_sequences,
            cfg.corpus.response_len_min => self.response_len_min,
            cfg.corpus.response_len_max => self.response_len_max,
            cfg.corpus.paired_lengths => self.paired_lengths,
            cfg.corpus.heldout_fraction => self.heldout_fraction,
            cfg.corpus.noise_cutoff => self.noise_cutoff,
            cfg.corpus.noise_flip_prob => self.noise_flip_prob,
            cfg.lm.d_model => self.d_model,
            cfg.lm.n_heads => self.n_heads,
            cfg.lm.ffn_hidden => self.ffn_hidden,
            cfg.lm.n_layers => self.n_layers,
            cfg.lm.max_len => self.max_len,
            cfg.sft.learning_rate => self.sft_lr,
            cfg.sft.epochs => self.sft_epochs,
            cfg.sft.batch_size => self.sft_batch_size,
            cfg.sft.grad_clip_norm => self.sft_clip,
            cfg.dpo.beta => self.beta,
            cfg.dpo.learning_rate => self.dpo_lr,
            cfg.dpo.epochs => self.dpo_epochs,
            cfg.dpo.batch_size => self.dpo_batch_size,
            cfg.dpo.grad_clip_norm => self.dpo_clip,
            cfg.dpo.delta => self.dpo_delta,
            cfg.sample.delta => self.delta,
            cfg.analyze.deltas => self.deltas,
            cfg.analyze.retain => self.analyze_retain,
            cfg.gradcheck.d_model => self.gradcheck_d_model,
            cfg.gradcheck.n_heads => self.gradcheck_n_heads,
            cfg.gradcheck.ffn_hidden => self.gradcheck_ffn_hidden,
            cfg.gradcheck.n_layers => self.gradcheck_n_layers,
            cfg.gradcheck.max_len => self.gradcheck_max_len,
            cfg.paths.sft_corpus => self.sft_corpus,
            cfg.paths.train => self.train,
            cfg.paths.heldout => self.heldout,
            cfg.paths.reference => self.reference,
            cfg.paths.sft_log => self.sft_log,
            cfg.paths.scored => self.scored,
            cfg.paths.sampled => self.sampled,
            cfg.paths.curve => self.curve,
            cfg.paths.curve_svg => self.curve_svg,
            cfg.paths.dpo_data => self.dpo_data,
            cfg.paths.policy => self.policy,
            cfg.paths.dpo_log => self.dpo_log,
            cfg.paths.report => self.report,
            cfg.paths.report_text => self.report_text,
            cfg.paths.gradcheck_report => self.gradcheck_report,
        }
        if self.retain.is_some() {
            cfg.sample.retain = self.retain;
        } else if self.delta.is_some() {
            cfg.sample.retain = None;
        }
    }
}

fn parse_seed(raw: &str, origin: &str) -> Result<u64> {
    raw.trim()
        .parse::<u64>()
        .map_err(|e| Error::usage(format!("{origin}: invalid seed {raw:?}: {e}")))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::usage(format!("config cannot be serialized: {e}")))
    }

    /// Defaults, then the config file, then `env_seed`, then flags.
    pub fn resolve(flags: &ConfigFlags, env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::from_toml(&text)
                    .map_err(|e| Error::usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(raw) = env_seed {
            cfg.run.seed = parse_seed(raw, SEED_ENV)?;
        }
        flags.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit; larger seeds could not be echoed.
        if self.run.seed > i64::MAX as u64 {
            return Err(Error::usage(format!("seed must be at most {}", i64::MAX)));
        }
        self.synth_config(0).validate()?;
        let h = self.corpus.heldout_fraction;
        if !(0.0..1.0).contains(&h) {
            return Err(Error::usage(format!("heldout_fraction must lie in [0, 1), got {h}")));
        }
        if !(0.0..=1.0).contains(&self.corpus.noise_flip_prob) {
            return Err(Error::usage("noise_flip_prob must lie in [0, 1]"));
        }
        if self.corpus.noise_cutoff.is_nan() {
            return Err(Error::usage("noise_cutoff must be a number"));
        }
        self.lm.arch().validate()?;
        self.gradcheck.arch().validate()?;
        self.sft_train_config(0).validate()?;
        self.dpo_train_config(0).validate()?;
        if !(self.sample.delta >= 0.0) {
            return Err(Error::usage(format!("delta must be non-negative, got {}", self.sample.delta)));
        }
        for f in self.sample.retain.iter().chain(&self.analyze.retain) {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::usage(format!("retention fraction must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_pairs: self.corpus.n_pairs,
            n_sft_sequences: self.corpus.n_sft_sequences,
            response_len_min: self.corpus.response_len_min,
            response_len_max: self.corpus.response_len_max,
            paired_lengths: self.corpus.paired_lengths,
            seed,
        }
    }

    pub fn sft_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.sft.learning_rate,
            epochs: self.sft.epochs,
            batch_size: self.sft.batch_size,
            grad_clip_norm: self.sft.grad_clip_norm,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn dpo_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            beta: self.dpo.beta,
            learning_rate: self.dpo.learning_rate,
            epochs: self.dpo.epochs,
            batch_size: self.dpo.batch_size,
            grad_clip_norm: self.dpo.grad_clip_norm,
            delta: self.dpo.delta,
            seed,
        }
    }

    /// `path` under the run directory unless it is absolute.
    pub fn artifact(&self, path: &Path) -> PathBuf {
        self.run.run_dir.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags() -> ConfigFlags {
        ConfigFlags::default()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("[paths]"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[dpo]\nbeta = 0.1\ngamma = 2.0\n").unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(err.to_string().contains("gamma"));
        assert!(RunConfig::from_toml("[extra]\nx = 1\n").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("[dpo]\nbeta = 0.1\n").unwrap();
        assert_eq!(cfg.dpo.beta, 0.1);
        assert_eq!(cfg.dpo.epochs, 3);
        assert_eq!(cfg.lm, LmSection::default());
    }

    #[test]
    fn precedence_file_env_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[run]\nseed = 5\n[dpo]\nbeta = 0.2\n").unwrap();
        let mut f = ConfigFlags {
            config: Some(path),
            ..flags()
        };
        assert_eq!(RunConfig::resolve(&f, None).unwrap().run.seed, 5);
        assert_eq!(RunConfig::resolve(&f, Some("9")).unwrap().run.seed, 9);
        f.seed = Some(11);
        f.beta = Some(0.3);
        let cfg = RunConfig::resolve(&f, Some("9")).unwrap();
        assert_eq!(cfg.run.seed, 11);
        assert_eq!(cfg.dpo.beta, 0.3);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let bad = [
            ConfigFlags { n_heads: Some(3), ..flags() },
            ConfigFlags { beta: Some(0.0), ..flags() },
            ConfigFlags { delta: Some(-1.0), ..flags() },
            ConfigFlags { response_len_min: Some(2), ..flags() },
            ConfigFlags { seed: Some(u64::MAX), ..flags() },
            ConfigFlags { retain: Some(1.5), ..flags() },
        ];
        for f in bad {
            assert!(matches!(RunConfig::resolve(&f, None), Err(Error::Usage(_))), "{f:?}");
        }
        assert!(matches!(RunConfig::resolve(&flags(), Some("x")), Err(Error::Usage(_))));
        let missing = ConfigFlags {
            config: Some("/nonexistent/prefgate.toml".into()),
            ..flags()
        };
        assert!(matches!(RunConfig::resolve(&missing, None), Err(Error::Usage(_))));
    }

    #[test]
    fn delta_flag_clears_file_retention() {
        let mut cfg = RunConfig::default();
        cfg.sample.retain = Some(0.5);
        ConfigFlags { delta: Some(1.0), ..flags() }.apply(&mut cfg);
        assert_eq!(cfg.sample.retain, None);
        assert_eq!(cfg.sample.delta, 1.0);
    }
}
