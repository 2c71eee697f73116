//! TextCNN: word embeddings, one convolution bank per window size with
//! ReLU, max-over-time pooling, and a linear classifier head.
//!
//! A window contributes only when every token in it is a real (non-PAD)
//! token. A bank with no such window yields an all-zero feature map, so an
//! all-PAD input produces exactly the head bias as logits.

use serde::{Deserialize, Serialize};

use super::{check_ids, first_argmax, uniform};
use crate::error::{Error, Result};
use crate::numerics::{dot, matmul_nt, Rng, Tensor2};
use crate::textpipe::PAD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextCnnConfig {
    pub vocab_size: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub windows: Vec<usize>,
    pub filters: usize,
}

impl TextCnnConfig {
    /// Windows {3, 4, 5}, 100 filters each, 128-dimensional embeddings.
    pub fn new(vocab_size: usize, classes: usize) -> Self {
        Self {
            vocab_size,
            classes,
            embed_dim: 128,
            windows: vec![3, 4, 5],
            filters: 100,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.windows.len() * self.filters
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.classes < 2 || self.embed_dim == 0 || self.filters == 0 {
            return Err(Error::Config(format!("degenerate TextCNN configuration {self:?}")));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config(
                "TextCNN window sizes must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Filters for one window size `h`: `weight` is `filters × (h·d)` acting on
/// the concatenated embeddings of `h` consecutive tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub window: usize,
    pub weight: Tensor2,
    pub bias: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextCnnParams {
    pub embedding: Tensor2,
    pub banks: Vec<FilterBank>,
    /// `classes × feature_dim`
    pub w_y: Tensor2,
    /// `1 × classes`
    pub b_y: Tensor2,
}

impl TextCnnParams {
    pub fn init(cfg: &TextCnnConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let embedding = uniform(cfg.vocab_size, d, 0.5, rng)?;
        let banks = cfg
            .windows
            .iter()
            .map(|&h| {
                Ok(FilterBank {
                    window: h,
                    weight: uniform(cfg.filters, h * d, 1.0 / ((h * d) as f64).sqrt(), rng)?,
                    bias: Tensor2::zeros(1, cfg.filters),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w_y = uniform(
            cfg.classes,
            cfg.feature_dim(),
            1.0 / (cfg.feature_dim() as f64).sqrt(),
            rng,
        )?;
        Ok(Self {
            embedding,
            banks,
            w_y,
            b_y: Tensor2::zeros(1, cfg.classes),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for b in &self.banks {
            out.push((format!("conv{}.weight", b.window), &b.weight));
            out.push((format!("conv{}.bias", b.window), &b.bias));
        }
        out.push(("classifier.w_y".into(), &self.w_y));
        out.push(("classifier.b_y".into(), &self.b_y));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.banks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.w_y);
        out.push(&mut self.b_y);
        out
    }
}

/// Winning window of one filter after max pooling.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolWinner {
    start: usize,
    /// ReLU was active (pre-activation > 0) at the winning position.
    active: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct ExampleCache {
    ids: Vec<usize>,
    /// Per bank, per filter; `None` when the bank had no valid window.
    winners: Vec<Vec<Option<PoolWinner>>>,
    pub(crate) pooled: Vec<f64>,
}

/// Starting positions of windows of width `h` made only of non-PAD tokens.
fn valid_starts(ids: &[usize], h: usize) -> Vec<usize> {
    if ids.len() < h {
        return Vec::new();
    }
    (0..=ids.len() - h)
        .filter(|&i| ids[i..i + h].iter().all(|&t| t != PAD))
        .collect()
}

fn forward_example(cfg: &TextCnnConfig, p: &TextCnnParams, ids: &[usize]) -> Result<(Vec<f64>, ExampleCache)> {
    check_ids(ids, cfg.vocab_size)?;
    let d = cfg.embed_dim;
    let mut pooled = Vec::with_capacity(cfg.feature_dim());
    let mut winners = Vec::with_capacity(p.banks.len());
    for bank in &p.banks {
        let h = bank.window;
        let starts = valid_starts(ids, h);
        if starts.is_empty() {
            pooled.extend(std::iter::repeat_n(0.0, cfg.filters));
            winners.push(vec![None; cfg.filters]);
            continue;
        }
        // rows: concatenated embeddings x_{i:i+h-1}
        let mut windows = Tensor2::zeros(starts.len(), h * d);
        for (r, &s) in starts.iter().enumerate() {
            let row = windows.row_mut(r);
            for t in 0..h {
                row[t * d..(t + 1) * d].copy_from_slice(p.embedding.row(ids[s + t]));
            }
        }
        let mut pre = matmul_nt(&windows, &bank.weight)?;
        pre.add_row_broadcast(bank.bias.data());
        let mut bank_winners = Vec::with_capacity(cfg.filters);
        for f in 0..cfg.filters {
            let (r, v) = first_argmax((0..starts.len()).map(|r| pre.get(r, f).max(0.0))).expect("at least one window");
            pooled.push(v);
            bank_winners.push(Some(PoolWinner {
                start: starts[r],
                active: pre.get(r, f) > 0.0,
            }));
        }
        winners.push(bank_winners);
    }
    let logits = (0..cfg.classes)
        .map(|c| p.b_y.data()[c] + dot(p.w_y.row(c), &pooled))
        .collect();
    Ok((
        logits,
        ExampleCache {
            ids: ids.to_vec(),
            winners,
            pooled,
        },
    ))
}

pub(crate) fn forward_batch(
    cfg: &TextCnnConfig,
    p: &TextCnnParams,
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

/// Forward pass: `batch × classes` logits. Softmax is left to the loss.
pub fn textcnn_forward(cfg: &TextCnnConfig, params: &TextCnnParams, batch: &[&[usize]]) -> Result<Tensor2> {
    Ok(forward_batch(cfg, params, batch)?.0)
}

pub(crate) fn backward_batch(
    cfg: &TextCnnConfig,
    p: &TextCnnParams,
    caches: &[ExampleCache],
    grad_logits: &Tensor2,
) -> TextCnnParams {
    let d = cfg.embed_dim;
    let mut g = TextCnnParams {
        embedding: Tensor2::zeros(p.embedding.rows(), d),
        banks: p
            .banks
            .iter()
            .map(|b| FilterBank {
                window: b.window,
                weight: Tensor2::zeros(b.weight.rows(), b.weight.cols()),
                bias: Tensor2::zeros(1, cfg.filters),
            })
            .collect(),
        w_y: Tensor2::zeros(cfg.classes, cfg.feature_dim()),
        b_y: Tensor2::zeros(1, cfg.classes),
    };
    for (b, cache) in caches.iter().enumerate() {
        let dlogits = grad_logits.row(b);
        let mut dpooled = vec![0.0; cfg.feature_dim()];
        for (c, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            g.b_y.data_mut()[c] += dl;
            for ((gw, &pv), (dp, &w)) in g
                .w_y
                .row_mut(c)
                .iter_mut()
                .zip(&cache.pooled)
                .zip(dpooled.iter_mut().zip(p.w_y.row(c)))
            {
                *gw += dl * pv;
                *dp += dl * w;
            }
        }
        for (k, (bank, gbank)) in p.banks.iter().zip(g.banks.iter_mut()).enumerate() {
            let h = bank.window;
            for (f, winner) in cache.winners[k].iter().enumerate() {
                let Some(PoolWinner { start, active: true }) = *winner else {
                    continue;
                };
                let gp = dpooled[k * cfg.filters + f];
                if gp == 0.0 {
                    continue;
                }
                gbank.bias.data_mut()[f] += gp;
                for t in 0..h {
                    let tok = cache.ids[start + t];
                    let w_slice = &bank.weight.row(f)[t * d..(t + 1) * d];
                    let gw_slice = &mut gbank.weight.row_mut(f)[t * d..(t + 1) * d];
                    for (gw, e) in gw_slice.iter_mut().zip(p.embedding.row(tok)) {
                        *gw += gp * e;
                    }
                    for (ge, w) in g.embedding.row_mut(tok).iter_mut().zip(w_slice) {
                        *ge += gp * w;
                    }
                }
            }
        }
    }
    g
}
