//! Pre-norm causal transformer with a hand-written backward pass.
//!
//! Activations are row-major `[positions × features]`. Weight matrices map
//! `x · W`, i.e. they are stored `[in × out]`.

use super::params::{LayerParams, ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

pub const LN_EPS: f64 = 1e-5;

/// `out[n×m] = a[n×k] · b[k×m]`
fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `out[n×k] = d[n×m] · bᵀ` where `b` is `[k×m]`.
fn matmul_bt(d: &[f64], n: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let di = &d[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = dot(di, &b[p * m..(p + 1) * m]);
        }
    }
    out
}

/// `grad[k×m] += aᵀ · d` where `a` is `[n×k]` and `d` is `[n×m]`.
fn accum_at_d(grad: &mut [f64], a: &[f64], n: usize, k: usize, d: &[f64], m: usize) {
    for i in 0..n {
        let di = &d[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (g, &dij) in grad[p * m..(p + 1) * m].iter_mut().zip(di) {
                *g += aip * dij;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_bias_rows(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn accum_col_sums(grad: &mut [f64], d: &[f64]) {
    for row in d.chunks(grad.len()) {
        for (g, v) in grad.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Natural-log softmax of one row, max-subtracted.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates gain and bias gradients.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        for j in 0..d {
            dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[heads × T × T]`, zero above the diagonal.
    att: Vec<f64>,
    attn_ctx: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    ids: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn positions(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn logits_row(&self, r: usize, vocab: usize) -> &[f64] {
        &self.logits[r * vocab..(r + 1) * vocab]
    }
}

fn check_ids(params: &ModelParams, ids: &[TokenId]) -> Result<()> {
    let arch = &params.arch;
    if ids.len() > arch.max_len {
        return Err(Error::data(format!(
            "sequence of {} tokens exceeds max_len {}",
            ids.len(),
            arch.max_len
        )));
    }
    if ids.is_empty() {
        return Err(Error::data("cannot run the model on an empty sequence"));
    }
    if let Some(bad) = ids.iter().find(|&&id| usize::from(id) >= arch.vocab) {
        return Err(Error::data(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

fn layer_forward(layer: &LayerParams, x: &mut [f64], t: usize, d: usize, heads: usize, f: usize) -> LayerCache {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (h1, ln1) = layer_norm(x, d, &layer.ln1_gain.data, &layer.ln1_bias.data);
    let q = matmul(&h1, t, d, &layer.wq.data, d);
    let k = matmul(&h1, t, d, &layer.wk.data, d);
    let v = matmul(&h1, t, d, &layer.wv.data, d);

    let mut att = vec![0.0; heads * t * t];
    let mut ctx = vec![0.0; t * d];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + hd];
            let scores: Vec<f64> = (0..=i)
                .map(|j| scale * dot(qi, &k[j * d + off..j * d + off + hd]))
                .collect();
            let probs = softmax(&scores);
            let arow = &mut att[(h * t + i) * t..(h * t + i) * t + t];
            arow[..=i].copy_from_slice(&probs);
            let ci = &mut ctx[i * d + off..i * d + off + hd];
            for (j, &p) in probs.iter().enumerate() {
                for (c, &vj) in ci.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                    *c += p * vj;
                }
            }
        }
    }
    let attn_out = matmul(&ctx, t, d, &layer.wo.data, d);
    for (xi, a) in x.iter_mut().zip(&attn_out) {
        *xi += a;
    }

    let (h2, ln2) = layer_norm(x, d, &layer.ln2_gain.data, &layer.ln2_bias.data);
    let mut pre_act = matmul(&h2, t, d, &layer.ffn_w1.data, f);
    add_bias_rows(&mut pre_act, &layer.ffn_b1.data);
    let act: Vec<f64> = pre_act.iter().map(|&z| z.max(0.0)).collect();
    let mut ffn_out = matmul(&act, t, f, &layer.ffn_w2.data, d);
    add_bias_rows(&mut ffn_out, &layer.ffn_b2.data);
    for (xi, o) in x.iter_mut().zip(&ffn_out) {
        *xi += o;
    }

    LayerCache {
        ln1,
        h1,
        q,
        k,
        v,
        att,
        attn_ctx: ctx,
        ln2,
        h2,
        pre_act,
        act,
    }
}

/// Full forward pass keeping the activations needed for backprop.
pub fn forward_cached(params: &ModelParams, ids: &[TokenId]) -> Result<ForwardCache> {
    check_ids(params, ids)?;
    let arch = &params.arch;
    let (t, d, f, vocab) = (ids.len(), arch.d_model, arch.ffn_hidden, arch.vocab);

    let mut x = vec![0.0; t * d];
    for (pos, &id) in ids.iter().enumerate() {
        let tok = params.tok_emb.row(usize::from(id));
        let pe = params.pos_emb.row(pos);
        for j in 0..d {
            x[pos * d + j] = tok[j] + pe[j];
        }
    }
    let layers = params
        .layers
        .iter()
        .map(|layer| layer_forward(layer, &mut x, t, d, arch.n_heads, f))
        .collect();
    let (hf, lnf) = layer_norm(&x, d, &params.lnf_gain.data, &params.lnf_bias.data);
    let logits = matmul(&hf, t, d, &params.out_proj.data, vocab);
    Ok(ForwardCache {
        ids: ids.to_vec(),
        layers,
        lnf,
        hf,
        logits,
    })
}

/// Logits `[positions × vocab]`: row `r` scores the token at `r + 1`.
pub fn forward(params: &ModelParams, ids: &[TokenId]) -> Result<Tensor> {
    let cache = forward_cached(params, ids)?;
    Ok(Tensor {
        shape: vec![ids.len(), params.arch.vocab],
        data: cache.logits,
    })
}

fn layer_backward(
    layer: &LayerParams,
    cache: &LayerCache,
    grad: &mut LayerParams,
    dx: &mut [f64],
    t: usize,
    d: usize,
    heads: usize,
    f: usize,
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    // FFN branch: x += relu(h2 W1 + b1) W2 + b2
    accum_col_sums(&mut grad.ffn_b2.data, dx);
    accum_at_d(&mut grad.ffn_w2.data, &cache.act, t, f, dx, d);
    let mut dz = matmul_bt(dx, t, d, &layer.ffn_w2.data, f);
    for (g, &z) in dz.iter_mut().zip(&cache.pre_act) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    accum_col_sums(&mut grad.ffn_b1.data, &dz);
    accum_at_d(&mut grad.ffn_w1.data, &cache.h2, t, d, &dz, f);
    let dh2 = matmul_bt(&dz, t, f, &layer.ffn_w1.data, d);
    let dres = layer_norm_backward(
        &dh2,
        &cache.ln2,
        d,
        &layer.ln2_gain.data,
        &mut grad.ln2_gain.data,
        &mut grad.ln2_bias.data,
    );
    for (a, b) in dx.iter_mut().zip(&dres) {
        *a += b;
    }

    // Attention branch: x += softmax(q kᵀ / √hd) v Wo
    accum_at_d(&mut grad.wo.data, &cache.attn_ctx, t, d, dx, d);
    let dctx = matmul_bt(dx, t, d, &layer.wo.data, d);
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut datt = vec![0.0; t];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let arow = &cache.att[(h * t + i) * t..(h * t + i) * t + t];
            let dci = &dctx[i * d + off..i * d + off + hd];
            for j in 0..=i {
                datt[j] = dot(dci, &cache.v[j * d + off..j * d + off + hd]);
                for (g, &c) in dv[j * d + off..j * d + off + hd].iter_mut().zip(dci) {
                    *g += arow[j] * c;
                }
            }
            let weighted: f64 = (0..=i).map(|j| arow[j] * datt[j]).sum();
            for j in 0..=i {
                let ds = arow[j] * (datt[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for p in 0..hd {
                    dq[i * d + off + p] += ds * cache.k[j * d + off + p];
                    dk[j * d + off + p] += ds * cache.q[i * d + off + p];
                }
            }
        }
    }
    accum_at_d(&mut grad.wq.data, &cache.h1, t, d, &dq, d);
    accum_at_d(&mut grad.wk.data, &cache.h1, t, d, &dk, d);
    accum_at_d(&mut grad.wv.data, &cache.h1, t, d, &dv, d);
    let mut dh1 = matmul_bt(&dq, t, d, &layer.wq.data, d);
    for (src, w) in [(&dk, &layer.wk), (&dv, &layer.wv)] {
        for (a, b) in dh1.iter_mut().zip(matmul_bt(src, t, d, &w.data, d)) {
            *a += b;
        }
    }
    let dres = layer_norm_backward(
        &dh1,
        &cache.ln1,
        d,
        &layer.ln1_gain.data,
        &mut grad.ln1_gain.data,
        &mut grad.ln1_bias.data,
    );
    for (a, b) in dx.iter_mut().zip(&dres) {
        *a += b;
    }
}

/// Backpropagates `dlogits` (same shape as the logits) and accumulates the
/// parameter gradients into `grads`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &[f64], grads: &mut ModelParams) {
    let arch = &params.arch;
    let (t, d, f, vocab) = (cache.ids.len(), arch.d_model, arch.ffn_hidden, arch.vocab);

    accum_at_d(&mut grads.out_proj.data, &cache.hf, t, d, dlogits, vocab);
    let dhf = matmul_bt(dlogits, t, vocab, &params.out_proj.data, d);
    let mut dx = layer_norm_backward(
        &dhf,
        &cache.lnf,
        d,
        &params.lnf_gain.data,
        &mut grads.lnf_gain.data,
        &mut grads.lnf_bias.data,
    );
    for ((layer, lcache), lgrad) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        layer_backward(layer, lcache, lgrad, &mut dx, t, d, arch.n_heads, f);
    }
    for (pos, &id) in cache.ids.iter().enumerate() {
        let dxr = &dx[pos * d..(pos + 1) * d];
        for (g, v) in grads.tok_emb.row_mut(usize::from(id)).iter_mut().zip(dxr) {
            *g += v;
        }
        for (g, v) in grads.pos_emb.row_mut(pos).iter_mut().zip(dxr) {
            *g += v;
        }
    }
}

/// `Σ log p(target | prefix)` over `(row, target)` positions, and the
/// gradient of `weight · Σ log p` with respect to the logits.
pub fn weighted_logprob_grad(
    cache: &ForwardCache,
    vocab: usize,
    targets: impl Iterator<Item = (usize, usize)>,
    weight: f64,
) -> (f64, Vec<f64>) {
    let mut dlogits = vec![0.0; cache.logits.len()];
    let mut total = 0.0;
    for (row, target) in targets {
        let logits = cache.logits_row(row, vocab);
        let lsm = log_softmax(logits);
        total += lsm[target];
        let drow = &mut dlogits[row * vocab..(row + 1) * vocab];
        for (g, lp) in drow.iter_mut().zip(&lsm) {
            *g -= weight * lp.exp();
        }
        drow[target] += weight;
    }
    (total, dlogits)
}
