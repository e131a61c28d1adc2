//! Preference datasets: the pair type, JSONL persistence, the synthetic
//! generator with known ground-truth quality, and label-noise injection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const MAX_SCORE: f64 = 10.0;
pub const PROMPT_LEN: usize = 8;
/// Rule steps cycle through `1..=MAX_RULE_STEP`.
pub const MAX_RULE_STEP: u8 = 3;

/// One `(x, y_w, y_l)` triple with optional ground-truth quality scores.
///
/// Keys not in the schema are kept in `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_chosen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_rejected: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl PreferencePair {
    pub fn new(prompt: impl Into<String>, chosen: impl Into<String>, rejected: impl Into<String>) -> Self {
        PreferencePair {
            prompt: prompt.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            score_chosen: None,
            score_rejected: None,
            extra: Map::new(),
        }
    }

    pub fn with_scores(mut self, chosen: f64, rejected: f64) -> Self {
        self.score_chosen = Some(chosen);
        self.score_rejected = Some(rejected);
        self
    }

    /// Both ground-truth scores, or a data error if either is missing.
    pub fn scores(&self) -> Result<(f64, f64)> {
        match (self.score_chosen, self.score_rejected) {
            (Some(c), Some(r)) => Ok((c, r)),
            _ => Err(Error::data("pair is missing ground-truth scores")),
        }
    }

    /// The same pair with the preference label reversed.
    pub fn swapped(&self) -> Self {
        PreferencePair {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            score_chosen: self.score_rejected,
            score_rejected: self.score_chosen,
            extra: self.extra.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("prompt", &self.prompt),
            ("chosen", &self.chosen),
            ("rejected", &self.rejected),
        ] {
            if value.is_empty() {
                return Err(Error::data(format!("field \"{name}\" must be non-empty")));
            }
        }
        for (name, score) in [
            ("score_chosen", self.score_chosen),
            ("score_rejected", self.score_rejected),
        ] {
            if let Some(s) = score {
                if !(0.0..=MAX_SCORE).contains(&s) {
                    return Err(Error::data(format!("{name} = {s} is outside [0, {MAX_SCORE}]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<PreferencePair>,
}

impl Dataset {
    pub fn new(pairs: Vec<PreferencePair>) -> Self {
        Dataset { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Dataset::new(self.pairs.iter().map(PreferencePair::swapped).collect())
    }

    /// Splits off the trailing `fraction` of pairs as a held-out set.
    pub fn split_heldout(mut self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::usage(format!("held-out fraction {fraction} must lie in [0, 1)")));
        }
        let n_heldout = (self.pairs.len() as f64 * fraction).round() as usize;
        let heldout = self.pairs.split_off(self.pairs.len() - n_heldout);
        Ok((self, Dataset::new(heldout)))
    }
}

/// Reads JSON objects line by line, skipping blank lines. `parse` gets the
/// 1-based line number for error reporting.
pub(crate) fn read_json_lines<T>(
    path: &Path,
    mut parse: impl FnMut(usize, &str) -> Result<T>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(idx + 1, &line)?);
    }
    Ok(out)
}

pub(crate) fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::data(format!("cannot serialize record: {e}")))?;
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_pair(path: &Path, line_no: usize, line: &str) -> Result<PreferencePair> {
    let pair: PreferencePair = serde_json::from_str(line)
        .map_err(|e| Error::data(format!("{}: line {line_no}: {e}", path.display())))?;
    pair.validate()
        .map_err(|e| Error::data(format!("{}: line {line_no}: {e}", path.display())))?;
    Ok(pair)
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    read_json_lines(path, |n, line| parse_pair(path, n, line)).map(Dataset::new)
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    write_json_lines(path, &dataset.pairs)
}

/// One supervised fine-tuning example: a prompt and its rule-following
/// continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: String,
    pub response: String,
}

pub fn load_sft_jsonl(path: &Path) -> Result<Vec<SftExample>> {
    read_json_lines(path, |n, line| {
        let ex: SftExample = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{}: line {n}: {e}", path.display())))?;
        if ex.prompt.is_empty() || ex.response.is_empty() {
            return Err(Error::data(format!(
                "{}: line {n}: prompt and response must be non-empty",
                path.display()
            )));
        }
        Ok(ex)
    })
}

pub fn write_sft_jsonl(examples: &[SftExample], path: &Path) -> Result<()> {
    write_json_lines(path, examples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub n_sft_sequences: usize,
    /// Inclusive bounds on response length in tokens (bytes).
    pub response_len_min: usize,
    pub response_len_max: usize,
    /// Both responses of a pair share one drawn length.
    pub paired_lengths: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_pairs: 2000,
            n_sft_sequences: 5000,
            response_len_min: 24,
            response_len_max: 48,
            paired_lengths: true,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.n_sft_sequences == 0 {
            return Err(Error::usage("n_pairs and n_sft_sequences must be positive"));
        }
        if self.response_len_min < 4 || self.response_len_max < self.response_len_min {
            return Err(Error::usage(format!(
                "response length range [{}, {}] must satisfy 4 <= min <= max",
                self.response_len_min, self.response_len_max
            )));
        }
        Ok(())
    }
}

/// Step by which the rule advances letters, determined by the first prompt
/// letter.
pub fn rule_step(prompt: &[u8]) -> u8 {
    1 + (prompt[0] - b'a') % MAX_RULE_STEP
}

fn advance(letter: u8, step: u8) -> u8 {
    b'a' + (letter - b'a' + step) % 26
}

fn random_letter(rng: &mut impl Rng) -> u8 {
    b'a' + rng.gen_range(0..26u8)
}

fn random_prompt(rng: &mut impl Rng) -> Vec<u8> {
    (0..PROMPT_LEN).map(|_| random_letter(rng)).collect()
}

/// Emits `len` letters; each is the rule continuation of the previous
/// letter with probability `quality`, a uniform random letter otherwise.
pub fn generate_response(prompt: &[u8], quality: f64, len: usize, rng: &mut impl Rng) -> Vec<u8> {
    let step = rule_step(prompt);
    let mut prev = *prompt.last().expect("prompt is non-empty");
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let follow = rng.gen::<f64>() < quality;
        let next = if follow {
            advance(prev, step)
        } else {
            random_letter(rng)
        };
        out.push(next);
        prev = next;
    }
    out
}

fn ascii(bytes: Vec<u8>) -> String {
    String::from_utf8(bytes).expect("generator emits ASCII letters")
}

/// Builds the SFT corpus (quality-1 responses only) and a scored preference
/// dataset whose chosen side always has the higher quality.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(Vec<SftExample>, Dataset)> {
    cfg.validate()?;
    let lens = cfg.response_len_min..=cfg.response_len_max;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth/sft"));
    let sft = (0..cfg.n_sft_sequences)
        .map(|_| {
            let prompt = random_prompt(&mut rng);
            let len = rng.gen_range(lens.clone());
            let response = generate_response(&prompt, 1.0, len, &mut rng);
            SftExample {
                prompt: ascii(prompt),
                response: ascii(response),
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth/pairs"));
    let pairs = (0..cfg.n_pairs)
        .map(|_| {
            let prompt = random_prompt(&mut rng);
            let q1: f64 = rng.gen();
            let q2: f64 = rng.gen();
            let len1 = rng.gen_range(lens.clone());
            let len2 = if cfg.paired_lengths {
                len1
            } else {
                rng.gen_range(lens.clone())
            };
            let r1 = generate_response(&prompt, q1, len1, &mut rng);
            let r2 = generate_response(&prompt, q2, len2, &mut rng);
            let ((q_hi, r_hi), (q_lo, r_lo)) = if q1 >= q2 {
                ((q1, r1), (q2, r2))
            } else {
                ((q2, r2), (q1, r1))
            };
            PreferencePair::new(ascii(prompt), ascii(r_hi), ascii(r_lo))
                .with_scores(MAX_SCORE * q_hi, MAX_SCORE * q_lo)
        })
        .collect();

    Ok((sft, Dataset::new(pairs)))
}

/// Swaps chosen/rejected with probability `flip_prob` on every pair whose
/// clarity is below `clarity_cutoff`.
pub fn inject_label_noise(
    dataset: &Dataset,
    clarity_cutoff: f64,
    flip_prob: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::usage(format!("flip probability {flip_prob} must lie in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise"));
    let mut pairs = Vec::with_capacity(dataset.len());
    for (idx, pair) in dataset.pairs.iter().enumerate() {
        let (c, r) = pair
            .scores()
            .map_err(|e| Error::data(format!("pair {idx}: {e}")))?;
        let ambiguous = (c - r).abs() < clarity_cutoff;
        if ambiguous && rng.gen::<f64>() < flip_prob {
            pairs.push(pair.swapped());
        } else {
            pairs.push(pair.clone());
        }
    }
    Ok(Dataset::new(pairs))
}
