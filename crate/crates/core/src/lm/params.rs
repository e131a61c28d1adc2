use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{DEFAULT_MAX_LEN, VOCAB_SIZE};

pub const INIT_RANGE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            vocab: VOCAB_SIZE,
            d_model: 32,
            n_heads: 2,
            ffn_hidden: 64,
            n_layers: 1,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab != VOCAB_SIZE {
            return Err(Error::usage(format!(
                "vocab must be {VOCAB_SIZE} for the byte tokenizer, got {}",
                self.vocab
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_hidden == 0 || self.n_layers == 0 {
            return Err(Error::usage("d_model, n_heads, ffn_hidden and n_layers must be positive"));
        }
        if self.max_len < 4 {
            return Err(Error::usage("max_len must be at least 4"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::usage(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

impl LayerParams {
    fn zeros(arch: &ArchConfig) -> Self {
        let d = arch.d_model;
        let h = arch.ffn_hidden;
        LayerParams {
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            ffn_w1: Tensor::zeros(&[d, h]),
            ffn_b1: Tensor::zeros(&[h]),
            ffn_w2: Tensor::zeros(&[h, d]),
            ffn_b2: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.w1", &self.ffn_w1),
            ("ffn.b1", &self.ffn_b1),
            ("ffn.w2", &self.ffn_w2),
            ("ffn.b2", &self.ffn_b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("ffn.w1", &mut self.ffn_w1),
            ("ffn.b1", &mut self.ffn_b1),
            ("ffn.w2", &mut self.ffn_w2),
            ("ffn.b2", &mut self.ffn_b2),
        ]
    }
}

/// Every weight of the causal LM. The same type carries gradients and
/// optimizer moments, which mirror the parameter shapes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub out_proj: Tensor,
}

fn is_norm_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2")
}

impl ModelParams {
    /// All-zero tensors with the given architecture (norm gains included).
    pub fn zeros(arch: &ArchConfig) -> Self {
        let d = arch.d_model;
        ModelParams {
            arch: *arch,
            tok_emb: Tensor::zeros(&[arch.vocab, d]),
            pos_emb: Tensor::zeros(&[arch.max_len, d]),
            layers: (0..arch.n_layers).map(|_| LayerParams::zeros(arch)).collect(),
            lnf_gain: Tensor::zeros(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            out_proj: Tensor::zeros(&[d, arch.vocab]),
        }
    }

    /// All weights zero with unit norm gains: the uniform next-token model.
    pub fn uniform(arch: &ArchConfig) -> Self {
        let mut params = Self::zeros(arch);
        for (name, t) in params.tensors_mut() {
            if is_norm_gain(&name) {
                t.data.fill(1.0);
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    /// Canonical tensor order, used for serialization, init and reports.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("lnf.gain".to_string(), &self.lnf_gain));
        out.push(("lnf.bias".to_string(), &self.lnf_bias));
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("lnf.gain".to_string(), &mut self.lnf_gain));
        out.push(("lnf.bias".to_string(), &mut self.lnf_bias));
        out.push(("out_proj".to_string(), &mut self.out_proj));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|((_, a), (_, b))| a.shape == b.shape)
    }
}

/// Uniform draw on the open interval `(0, 1)` from the top 53 bits of a
/// ChaCha8 word.
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Weights uniform on `(-0.02, 0.02)` drawn in canonical tensor order from a
/// ChaCha8 stream seeded with `seed`; norm gains 1, all biases 0.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(arch);
    for (name, t) in params.tensors_mut() {
        if is_norm_gain(&name) {
            t.data.fill(1.0);
        } else if !is_bias(&name) {
            for v in t.data.iter_mut() {
                *v = INIT_RANGE * (2.0 * open_unit(&mut rng) - 1.0);
            }
        }
    }
    Ok(params)
}
