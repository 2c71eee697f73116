//! Small transformer encoder classifier.
//!
//! ```text
//! H0 = E[ids] + P[positions]
//! per layer:
//!   Z_i = softmax(Q_i K_iᵀ / √d_k) V_i,  Q_i = H W^Q_i, K_i = H W^K_i, V_i = H W^V_i
//!   M   = Concat(Z_1 … Z_h) W_O
//!   U   = M                     | LayerNorm(H + M)    (residual_norm)
//!   F   = relu((U W1 + b1) W2 + b2)
//!   H'  = F                     | LayerNorm(U + F)
//! pooled_j = max over non-PAD positions of H_L[·, j]
//! logits   = W_y · pooled + b_y
//! ```
//!
//! The feed-forward block applies ReLU once, outside both linear maps.
//! With `residual_norm = false` the layer is exactly attention followed by
//! that feed-forward block.

use serde::{Deserialize, Serialize};

use super::{check_ids, first_argmax, uniform};
use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, matmul_nt, matmul_tn, softmax_unchecked, Rng, Tensor2};
use crate::textpipe::PAD;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub classes: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Residual connections with post-layer normalisation around both blocks.
    pub residual_norm: bool,
}

impl TransformerConfig {
    /// d = 64, 4 heads, 2 layers, FFN width 256, residual + norm on.
    pub fn new(vocab_size: usize, classes: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            classes,
            max_len,
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 256,
            residual_norm: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.classes < 2 || self.max_len == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(format!("degenerate transformer configuration {self:?}")));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Projections of one attention head, each `d_model × d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor2,
    pub beta: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub heads: Vec<HeadParams>,
    /// `d_model × d_model`, applied to the concatenated head outputs.
    pub w_o: Tensor2,
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
    pub norm1: Option<LayerNormParams>,
    pub norm2: Option<LayerNormParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub embedding: Tensor2,
    pub positions: Tensor2,
    pub layers: Vec<EncoderLayerParams>,
    pub w_y: Tensor2,
    pub b_y: Tensor2,
}

impl TransformerParams {
    pub fn init(cfg: &TransformerConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let dk = cfg.head_dim();
        let proj = 1.0 / (d as f64).sqrt();
        let embedding = uniform(cfg.vocab_size, d, 0.5, rng)?;
        let positions = uniform(cfg.max_len, d, 0.1, rng)?;
        let norm = |d: usize| LayerNormParams {
            gamma: Tensor2::from_vec(1, d, vec![1.0; d]).expect("finite"),
            beta: Tensor2::zeros(1, d),
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let heads = (0..cfg.heads)
                .map(|_| {
                    Ok(HeadParams {
                        w_q: uniform(d, dk, proj, rng)?,
                        w_k: uniform(d, dk, proj, rng)?,
                        w_v: uniform(d, dk, proj, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(EncoderLayerParams {
                heads,
                w_o: uniform(d, d, proj, rng)?,
                w1: uniform(d, cfg.ffn_dim, proj, rng)?,
                b1: Tensor2::zeros(1, cfg.ffn_dim),
                w2: uniform(cfg.ffn_dim, d, 1.0 / (cfg.ffn_dim as f64).sqrt(), rng)?,
                b2: Tensor2::zeros(1, d),
                norm1: cfg.residual_norm.then(|| norm(d)),
                norm2: cfg.residual_norm.then(|| norm(d)),
            });
        }
        Ok(Self {
            embedding,
            positions,
            layers,
            w_y: uniform(cfg.classes, d, proj, rng)?,
            b_y: Tensor2::zeros(1, cfg.classes),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("positions".to_string(), &self.positions),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (i, h) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{i}.w_q"), &h.w_q));
                out.push((format!("layer{l}.head{i}.w_k"), &h.w_k));
                out.push((format!("layer{l}.head{i}.w_v"), &h.w_v));
            }
            out.push((format!("layer{l}.w_o"), &layer.w_o));
            out.push((format!("layer{l}.ffn.w1"), &layer.w1));
            out.push((format!("layer{l}.ffn.b1"), &layer.b1));
            out.push((format!("layer{l}.ffn.w2"), &layer.w2));
            out.push((format!("layer{l}.ffn.b2"), &layer.b2));
            if let Some(n) = &layer.norm1 {
                out.push((format!("layer{l}.norm1.gamma"), &n.gamma));
                out.push((format!("layer{l}.norm1.beta"), &n.beta));
            }
            if let Some(n) = &layer.norm2 {
                out.push((format!("layer{l}.norm2.gamma"), &n.gamma));
                out.push((format!("layer{l}.norm2.beta"), &n.beta));
            }
        }
        out.push(("classifier.w_y".into(), &self.w_y));
        out.push(("classifier.b_y".into(), &self.b_y));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = vec![&mut self.embedding, &mut self.positions];
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.push(&mut h.w_q);
                out.push(&mut h.w_k);
                out.push(&mut h.w_v);
            }
            out.push(&mut layer.w_o);
            out.push(&mut layer.w1);
            out.push(&mut layer.b1);
            out.push(&mut layer.w2);
            out.push(&mut layer.b2);
            if let Some(n) = &mut layer.norm1 {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
            if let Some(n) = &mut layer.norm2 {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out.push(&mut self.w_y);
        out.push(&mut self.b_y);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }
}

/// Attention weights `softmax(Q Kᵀ / √d_k)` with masked keys set to `-inf`
/// before the softmax. `key_mask[j] == true` keeps key `j`.
fn attention_weights(q: &Tensor2, k: &Tensor2, key_mask: Option<&[bool]>) -> Result<Tensor2> {
    if q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "attention scores",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if let Some(mask) = key_mask {
        if mask.len() != k.rows() {
            return Err(Error::InvalidInput(format!(
                "key mask of length {} for {} keys",
                mask.len(),
                k.rows()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("every key position is masked".into()));
        }
    }
    let mut scores = matmul_nt(q, k)?;
    scores.scale(1.0 / (q.cols() as f64).sqrt());
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        if let Some(mask) = key_mask {
            for (s, &keep) in row.iter_mut().zip(mask) {
                if !keep {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        let probs = softmax_unchecked(row);
        row.copy_from_slice(&probs);
    }
    Ok(scores)
}

/// `softmax(Q Kᵀ / √d_k) V`, with optional key masking.
pub fn scaled_dot_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, key_mask: Option<&[bool]>) -> Result<Tensor2> {
    if k.rows() != v.rows() {
        return Err(Error::Dimension {
            op: "scaled_dot_attention",
            left: k.shape(),
            right: v.shape(),
        });
    }
    matmul(&attention_weights(q, k, key_mask)?, v)
}

#[derive(Clone, Debug)]
struct HeadCache {
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    attn: Tensor2,
}

fn attention_block(h: &Tensor2, layer: &EncoderLayerParams) -> Result<(Tensor2, Vec<HeadCache>, Tensor2)> {
    let d = h.cols();
    let n_heads = layer.heads.len();
    if n_heads == 0 || layer.heads.iter().any(|hp| hp.w_q.cols() * n_heads != d) {
        return Err(Error::Config(format!(
            "model width {d} is not split evenly across {n_heads} heads"
        )));
    }
    let dk = d / n_heads;
    let mut concat = Tensor2::zeros(h.rows(), d);
    let mut caches = Vec::with_capacity(n_heads);
    for (i, hp) in layer.heads.iter().enumerate() {
        let q = matmul(h, &hp.w_q)?;
        let k = matmul(h, &hp.w_k)?;
        let v = matmul(h, &hp.w_v)?;
        let attn = attention_weights(&q, &k, None)?;
        let z = matmul(&attn, &v)?;
        concat.set_col_block(i * dk, &z);
        caches.push(HeadCache { q, k, v, attn });
    }
    let out = matmul(&concat, &layer.w_o)?;
    Ok((out, caches, concat))
}

/// Multi-head self-attention of layer `layer`: per-head projections and
/// attention, concatenation, output projection. Rows of `h` are positions.
pub fn multi_head_attention(h: &Tensor2, params: &TransformerParams, layer: usize) -> Result<Tensor2> {
    let lp = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidInput(format!("no encoder layer {layer}")))?;
    Ok(attention_block(h, lp)?.0)
}

/// `relu((Z W1 + b1) W2 + b2)` applied row-wise.
pub fn ffn(z: &Tensor2, layer: &EncoderLayerParams) -> Result<Tensor2> {
    Ok(ffn_cached(z, layer)?.2)
}

/// Returns (inner, pre-activation, output).
fn ffn_cached(z: &Tensor2, layer: &EncoderLayerParams) -> Result<(Tensor2, Tensor2, Tensor2)> {
    let mut inner = matmul(z, &layer.w1)?;
    inner.add_row_broadcast(layer.b1.data());
    let mut pre = matmul(&inner, &layer.w2)?;
    pre.add_row_broadcast(layer.b2.data());
    let mut out = pre.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok((inner, pre, out))
}

#[derive(Clone, Debug)]
struct NormCache {
    normalized: Tensor2,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Tensor2, p: &LayerNormParams) -> (Tensor2, NormCache) {
    let d = x.cols();
    let mut normalized = Tensor2::zeros(x.rows(), d);
    let mut out = Tensor2::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for (j, &x) in row.iter().enumerate() {
            let xh = (x - mean) * is;
            normalized.set(r, j, xh);
            out.set(r, j, p.gamma.data()[j] * xh + p.beta.data()[j]);
        }
    }
    (out, NormCache { normalized, inv_std })
}

fn layer_norm_backward(dy: &Tensor2, cache: &NormCache, p: &LayerNormParams, g: &mut LayerNormParams) -> Tensor2 {
    let d = dy.cols();
    let mut dx = Tensor2::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let xh = cache.normalized.row(r);
        let dyr = dy.row(r);
        let mut dxh = vec![0.0; d];
        for j in 0..d {
            g.gamma.data_mut()[j] += dyr[j] * xh[j];
            g.beta.data_mut()[j] += dyr[j];
            dxh[j] = dyr[j] * p.gamma.data()[j];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
        let mean_dxh_xh = dot(&dxh, xh) / d as f64;
        let is = cache.inv_std[r];
        for j in 0..d {
            dx.set(r, j, is * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh));
        }
    }
    dx
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Tensor2,
    heads: Vec<HeadCache>,
    concat: Tensor2,
    norm1: Option<NormCache>,
    ffn_in: Tensor2,
    ffn_inner: Tensor2,
    ffn_pre: Tensor2,
    norm2: Option<NormCache>,
}

fn layer_forward(h: &Tensor2, lp: &EncoderLayerParams) -> Result<(Tensor2, LayerCache)> {
    let (m, heads, concat) = attention_block(h, lp)?;
    let (u, norm1) = match &lp.norm1 {
        Some(np) => {
            let mut sum = h.clone();
            sum.add_assign(&m)?;
            let (u, c) = layer_norm(&sum, np);
            (u, Some(c))
        }
        None => (m, None),
    };
    let (inner, pre, f) = ffn_cached(&u, lp)?;
    let (out, norm2) = match &lp.norm2 {
        Some(np) => {
            let mut sum = u.clone();
            sum.add_assign(&f)?;
            let (o, c) = layer_norm(&sum, np);
            (o, Some(c))
        }
        None => (f, None),
    };
    Ok((
        out,
        LayerCache {
            input: h.clone(),
            heads,
            concat,
            norm1,
            ffn_in: u,
            ffn_inner: inner,
            ffn_pre: pre,
            norm2,
        },
    ))
}

fn layer_backward(
    d_out: &Tensor2,
    lp: &EncoderLayerParams,
    cache: &LayerCache,
    g: &mut EncoderLayerParams,
) -> Result<Tensor2> {
    // output normalisation / residual
    let (d_f, mut d_u) = match (&lp.norm2, &cache.norm2, &mut g.norm2) {
        (Some(np), Some(nc), Some(gn)) => {
            let d_sum = layer_norm_backward(d_out, nc, np, gn);
            (d_sum.clone(), d_sum)
        }
        _ => (d_out.clone(), Tensor2::zeros(d_out.rows(), d_out.cols())),
    };

    // feed-forward
    let mut d_pre = d_f;
    for (dv, &pv) in d_pre.data_mut().iter_mut().zip(cache.ffn_pre.data()) {
        if pv <= 0.0 {
            *dv = 0.0;
        }
    }
    g.w2.add_assign(&matmul_tn(&cache.ffn_inner, &d_pre)?)?;
    add_to_row(&mut g.b2, &d_pre.col_sums());
    let d_inner = matmul_nt(&d_pre, &lp.w2)?;
    g.w1.add_assign(&matmul_tn(&cache.ffn_in, &d_inner)?)?;
    add_to_row(&mut g.b1, &d_inner.col_sums());
    d_u.add_assign(&matmul_nt(&d_inner, &lp.w1)?)?;

    // attention normalisation / residual
    let (d_m, mut d_h) = match (&lp.norm1, &cache.norm1, &mut g.norm1) {
        (Some(np), Some(nc), Some(gn)) => {
            let d_sum = layer_norm_backward(&d_u, nc, np, gn);
            (d_sum.clone(), d_sum)
        }
        _ => (d_u, Tensor2::zeros(d_out.rows(), d_out.cols())),
    };

    // output projection and heads
    g.w_o.add_assign(&matmul_tn(&cache.concat, &d_m)?)?;
    let d_concat = matmul_nt(&d_m, &lp.w_o)?;
    let dk = lp.heads[0].w_q.cols();
    let scale = 1.0 / (dk as f64).sqrt();
    for (i, ((hp, hc), gh)) in lp.heads.iter().zip(&cache.heads).zip(g.heads.iter_mut()).enumerate() {
        let d_z = d_concat.col_block(i * dk, dk);
        let d_attn = matmul_nt(&d_z, &hc.v)?;
        let d_v = matmul_tn(&hc.attn, &d_z)?;
        // softmax backward, row-wise
        let mut d_scores = Tensor2::zeros(hc.attn.rows(), hc.attn.cols());
        for r in 0..hc.attn.rows() {
            let a = hc.attn.row(r);
            let da = d_attn.row(r);
            let inner = dot(a, da);
            for (j, ds) in d_scores.row_mut(r).iter_mut().enumerate() {
                *ds = a[j] * (da[j] - inner) * scale;
            }
        }
        let d_q = matmul(&d_scores, &hc.k)?;
        let d_k = matmul_tn(&d_scores, &hc.q)?;
        gh.w_q.add_assign(&matmul_tn(&cache.input, &d_q)?)?;
        gh.w_k.add_assign(&matmul_tn(&cache.input, &d_k)?)?;
        gh.w_v.add_assign(&matmul_tn(&cache.input, &d_v)?)?;
        d_h.add_assign(&matmul_nt(&d_q, &hp.w_q)?)?;
        d_h.add_assign(&matmul_nt(&d_k, &hp.w_k)?)?;
        d_h.add_assign(&matmul_nt(&d_v, &hp.w_v)?)?;
    }
    Ok(d_h)
}

fn add_to_row(t: &mut Tensor2, v: &[f64]) {
    for (a, b) in t.data_mut().iter_mut().zip(v) {
        *a += b;
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ExampleCache {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    /// Row of the final hidden states that won each pooled dimension.
    argmax: Vec<usize>,
    pub(crate) pooled: Vec<f64>,
}

fn forward_example(cfg: &TransformerConfig, p: &TransformerParams, ids: &[usize]) -> Result<(Vec<f64>, ExampleCache)> {
    check_ids(ids, cfg.vocab_size)?;
    if ids.len() > cfg.max_len {
        return Err(Error::InvalidInput(format!(
            "sequence of length {} exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    let d = cfg.d_model;
    let positions: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != PAD).collect();
    let tokens: Vec<usize> = positions.iter().map(|&i| ids[i]).collect();

    let mut layers = Vec::with_capacity(p.layers.len());
    let (pooled, argmax) = if positions.is_empty() {
        (vec![0.0; d], Vec::new())
    } else {
        let mut h = Tensor2::zeros(positions.len(), d);
        for (r, (&tok, &pos)) in tokens.iter().zip(&positions).enumerate() {
            for (j, v) in h.row_mut(r).iter_mut().enumerate() {
                *v = p.embedding.get(tok, j) + p.positions.get(pos, j);
            }
        }
        for lp in &p.layers {
            let (next, cache) = layer_forward(&h, lp)?;
            layers.push(cache);
            h = next;
        }
        (0..d)
            .map(|j| {
                let (r, v) = first_argmax((0..h.rows()).map(|r| h.get(r, j))).expect("non-empty");
                (v, r)
            })
            .unzip()
    };
    let logits = (0..cfg.classes)
        .map(|c| p.b_y.data()[c] + dot(p.w_y.row(c), &pooled))
        .collect();
    Ok((
        logits,
        ExampleCache {
            tokens,
            positions,
            layers,
            argmax,
            pooled,
        },
    ))
}

pub(crate) fn forward_batch(
    cfg: &TransformerConfig,
    p: &TransformerParams,
    batch: &[&[usize]],
) -> Result<(Tensor2, Vec<ExampleCache>)> {
    let mut logits = Tensor2::zeros(batch.len(), cfg.classes);
    let mut caches = Vec::with_capacity(batch.len());
    for (b, ids) in batch.iter().enumerate() {
        let (l, cache) = forward_example(cfg, p, ids)?;
        logits.row_mut(b).copy_from_slice(&l);
        caches.push(cache);
    }
    Ok((logits, caches))
}

/// Forward pass: `batch × classes` logits.
pub fn transformer_forward(cfg: &TransformerConfig, params: &TransformerParams, batch: &[&[usize]]) -> Result<Tensor2> {
    Ok(forward_batch(cfg, params, batch)?.0)
}

pub(crate) fn backward_batch(
    cfg: &TransformerConfig,
    p: &TransformerParams,
    caches: &[ExampleCache],
    grad_logits: &Tensor2,
) -> Result<TransformerParams> {
    let d = cfg.d_model;
    let mut g = p.zeros_like();
    for (b, cache) in caches.iter().enumerate() {
        let dlogits = grad_logits.row(b);
        let mut dpooled = vec![0.0; d];
        for (c, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            g.b_y.data_mut()[c] += dl;
            for (j, dp) in dpooled.iter_mut().enumerate() {
                g.w_y.data_mut()[c * d + j] += dl * cache.pooled[j];
                *dp += dl * p.w_y.get(c, j);
            }
        }
        if cache.positions.is_empty() {
            continue;
        }
        let mut dh = Tensor2::zeros(cache.positions.len(), d);
        for (j, &r) in cache.argmax.iter().enumerate() {
            dh.set(r, j, dpooled[j]);
        }
        for ((lp, lc), gl) in p.layers.iter().zip(&cache.layers).zip(g.layers.iter_mut()).rev() {
            dh = layer_backward(&dh, lp, lc, gl)?;
        }
        for (r, (&tok, &pos)) in cache.tokens.iter().zip(&cache.positions).enumerate() {
            for (j, &v) in dh.row(r).iter().enumerate() {
                g.embedding.data_mut()[tok * d + j] += v;
                g.positions.data_mut()[pos * d + j] += v;
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_init;

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        seeded_init(rows, cols, -1.0, 1.0, &mut Rng::new(seed)).unwrap()
    }

    fn tiny_cfg(residual_norm: bool, heads: usize, layers: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size: 12,
            classes: 2,
            max_len: 8,
            d_model: 8,
            heads,
            layers,
            ffn_dim: 6,
            residual_norm,
        }
    }

    /// softmax(QKᵀ/√d) V computed with explicit loops and exp/sum.
    fn attention_oracle(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Tensor2 {
        let dk = q.cols() as f64;
        let mut out = Tensor2::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / dk.sqrt())
                .collect();
            let w: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..v.cols() {
                out.set(i, c, (0..k.rows()).map(|j| w[j] / z * v.get(j, c)).sum());
            }
        }
        out
    }

    #[test]
    fn attention_matches_unfused_formula() {
        let (q, k, v) = (rand(4, 8, 1), rand(4, 8, 2), rand(4, 8, 3));
        let got = scaled_dot_attention(&q, &k, &v, None).unwrap();
        let want = attention_oracle(&q, &k, &v);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn attention_saturation_and_uniform_limits() {
        // query aligned with key 1, other keys orthogonal, large scale
        let q = Tensor2::from_rows(&[vec![0.0, 100.0, 0.0]]).unwrap();
        let k = Tensor2::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let v = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-9 && (out.get(0, 1) - 4.0).abs() < 1e-9);

        let zero_q = Tensor2::zeros(2, 3);
        let out = scaled_dot_attention(&zero_q, &k, &v, None).unwrap();
        let means = [3.0, 4.0];
        for r in 0..2 {
            for (c, m) in means.iter().enumerate() {
                assert!((out.get(r, c) - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_masking() {
        let (q, k, v) = (rand(3, 4, 4), rand(5, 4, 5), rand(5, 2, 6));
        let mask = [true, false, true, true, false];
        let w = attention_weights(&q, &k, Some(&mask)).unwrap();
        for r in 0..3 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert_eq!(w.get(r, 1), 0.0);
            assert_eq!(w.get(r, 4), 0.0);
        }
        // masking equals dropping the masked keys
        let keep = [0usize, 2, 3];
        let k2 = Tensor2::from_rows(&keep.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let v2 = Tensor2::from_rows(&keep.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        let b = scaled_dot_attention(&q, &k2, &v2, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(scaled_dot_attention(&q, &k, &v, Some(&[false; 5])).is_err());
        assert!(matches!(
            scaled_dot_attention(&q, &rand(5, 3, 1), &v, None),
            Err(Error::Dimension { .. })
        ));
        assert!(scaled_dot_attention(&q, &k, &rand(4, 2, 1), None).is_err());
    }

    #[test]
    fn single_head_is_plain_attention_with_projections() {
        let cfg = tiny_cfg(false, 1, 1);
        let p = TransformerParams::init(&cfg, &mut Rng::new(2)).unwrap();
        let h = rand(5, 8, 9);
        let hp = &p.layers[0].heads[0];
        let z = scaled_dot_attention(
            &matmul(&h, &hp.w_q).unwrap(),
            &matmul(&h, &hp.w_k).unwrap(),
            &matmul(&h, &hp.w_v).unwrap(),
            None,
        )
        .unwrap();
        let want = matmul(&z, &p.layers[0].w_o).unwrap();
        let got = multi_head_attention(&h, &p, 0).unwrap();
        assert_eq!(got.shape(), (5, 8));
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn head_permutation_leaves_output_unchanged() {
        let cfg = tiny_cfg(false, 4, 1);
        let p = TransformerParams::init(&cfg, &mut Rng::new(7)).unwrap();
        let h = rand(6, 8, 10);
        let base = multi_head_attention(&h, &p, 0).unwrap();
        assert_eq!(base.shape(), h.shape());

        let perm = [2usize, 0, 3, 1];
        let dk = cfg.head_dim();
        let mut q = p.clone();
        let layer = &mut q.layers[0];
        layer.heads = perm.iter().map(|&i| p.layers[0].heads[i].clone()).collect();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for r in 0..dk {
                let src = p.layers[0].w_o.row(old_i * dk + r).to_vec();
                layer.w_o.row_mut(new_i * dk + r).copy_from_slice(&src);
            }
        }
        let permuted = multi_head_attention(&h, &q, 0).unwrap();
        for (a, b) in base.data().iter().zip(permuted.data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn head_divisibility_is_checked() {
        let cfg = tiny_cfg(false, 3, 1);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ffn_identity_and_relu() {
        let d = 4;
        let layer = EncoderLayerParams {
            heads: vec![],
            w_o: Tensor2::identity(d),
            w1: Tensor2::identity(d),
            b1: Tensor2::zeros(1, d),
            w2: Tensor2::identity(d),
            b2: Tensor2::zeros(1, d),
            norm1: None,
            norm2: None,
        };
        let z = Tensor2::from_rows(&[vec![0.0, 1.5, 2.0, 0.25], vec![3.0, 0.0, 0.5, 7.0]]).unwrap();
        assert_eq!(ffn(&z, &layer).unwrap(), z);
        let neg = Tensor2::from_rows(&[vec![-1.0, -2.0, -0.5, -3.0]]).unwrap();
        assert!(ffn(&neg, &layer).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_gradient_matches_finite_differences() {
        let cfg = tiny_cfg(false, 2, 1);
        let mut p = TransformerParams::init(&cfg, &mut Rng::new(13)).unwrap();
        p.layers[0].b1 = rand(1, 6, 14);
        p.layers[0].b2 = rand(1, 8, 15);
        let z = rand(5, 8, 16);
        let upstream = rand(5, 8, 17);
        // scalar: Σ upstream ⊙ ffn(z)
        let objective = |x: &Tensor2| -> Result<f64> { Ok(dot(ffn(x, &p.layers[0])?.data(), upstream.data())) };
        let fd = crate::numerics::finite_diff_grad(objective, &z, 1e-5).unwrap();

        let (inner, pre, _) = ffn_cached(&z, &p.layers[0]).unwrap();
        let mut d_pre = upstream.clone();
        for (dv, &pv) in d_pre.data_mut().iter_mut().zip(pre.data()) {
            if pv <= 0.0 {
                *dv = 0.0;
            }
        }
        let _ = inner;
        let d_inner = matmul_nt(&d_pre, &p.layers[0].w2).unwrap();
        let analytic = matmul_nt(&d_inner, &p.layers[0].w1).unwrap();
        let mut diff = analytic.clone();
        diff.axpy(-1.0, &fd).unwrap();
        assert!(diff.frobenius_norm() / analytic.frobenius_norm() < 1e-6);
    }

    #[test]
    fn zero_layers_pool_embeddings() {
        let cfg = tiny_cfg(true, 2, 0);
        let p = TransformerParams::init(&cfg, &mut Rng::new(3)).unwrap();
        let ids = [3usize, 5, 0, 0];
        let (logits, cache) = forward_example(&cfg, &p, &ids).unwrap();
        for j in 0..cfg.d_model {
            let a = p.embedding.get(3, j) + p.positions.get(0, j);
            let b = p.embedding.get(5, j) + p.positions.get(1, j);
            assert_eq!(cache.pooled[j], a.max(b));
        }
        assert_eq!(logits.len(), 2);
    }

    #[test]
    fn padding_is_invisible() {
        let cfg = tiny_cfg(true, 2, 2);
        let p = TransformerParams::init(&cfg, &mut Rng::new(3)).unwrap();
        let (a, _) = forward_example(&cfg, &p, &[3, 5, 7]).unwrap();
        let (b, _) = forward_example(&cfg, &p, &[3, 5, 7, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(a, b);
        let (c, _) = forward_example(&cfg, &p, &[0, 0, 0]).unwrap();
        assert_eq!(c, p.b_y.data().to_vec());
        assert!(forward_example(&cfg, &p, &[3; 9]).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = rand(3, 8, 21);
        let p = LayerNormParams {
            gamma: Tensor2::from_vec(1, 8, vec![1.0; 8]).unwrap(),
            beta: Tensor2::zeros(1, 8),
        };
        let (y, _) = layer_norm(&x, &p);
        for r in 0..3 {
            let m = y.row(r).iter().sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
        }
    }
}
