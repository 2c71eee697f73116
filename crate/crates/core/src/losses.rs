//! Entropy, cross-entropy and KL divergence in nats, plus the fused
//! softmax-loss gradient used by the trainer.
//!
//! Predicted probabilities are floored at [`PROB_FLOOR`] inside logarithms
//! only; they are never renormalised.
//!
//! Summing `KL(D'_i ‖ P_i)` over examples `i` sums over the classes of each
//! example's distribution; minimising it is equivalent to maximising
//! `Σ_i Σ_classes d·ln p`, because the two differ by the target entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelDistribution;
use crate::numerics::softmax;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    Kl,
    MultiLabelCe,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Kl => "kl",
            LossKind::MultiLabelCe => "multi_label_ce",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
}

/// Per-thread call counters for the objective functions.
///
/// Lets tests confirm which objective a training run actually evaluated.
pub mod probe {
    use std::cell::Cell;

    thread_local! {
        static CE_CALLS: Cell<u64> = const { Cell::new(0) };
        static KL_CALLS: Cell<u64> = const { Cell::new(0) };
    }

    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
    pub struct Counts {
        pub cross_entropy: u64,
        pub kl_divergence: u64,
    }

    pub fn snapshot() -> Counts {
        Counts {
            cross_entropy: CE_CALLS.with(Cell::get),
            kl_divergence: KL_CALLS.with(Cell::get),
        }
    }

    pub fn reset() {
        CE_CALLS.with(|c| c.set(0));
        KL_CALLS.with(|c| c.set(0));
    }

    pub(super) fn hit_ce() {
        CE_CALLS.with(|c| c.set(c.get() + 1));
    }

    pub(super) fn hit_kl() {
        KL_CALLS.with(|c| c.set(c.get() + 1));
    }
}

#[inline]
fn ln_floor(q: f64) -> f64 {
    q.max(PROB_FLOOR).ln()
}

fn same_k(p: &LabelDistribution, q: &LabelDistribution) -> Result<()> {
    if p.k() != q.k() {
        return Err(Error::InvalidInput(format!(
            "distributions over {} and {} classes",
            p.k(),
            q.k()
        )));
    }
    Ok(())
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InfiniteLoss)
    }
}

/// `-Σ p ln p`, with `0·ln 0 = 0`.
pub fn entropy(p: &LabelDistribution) -> f64 {
    -p.probs().iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `H(p, q) = -Σ p ln q`.
pub fn cross_entropy(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    probe::hit_ce();
    same_k(p, q)?;
    let h = -p
        .probs()
        .iter()
        .zip(q.probs())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * ln_floor(qi))
        .sum::<f64>();
    finite(h)
}

/// `KL(p ‖ q) = Σ p ln(p / q)`, summed directly rather than via `H(p,q) - H(p)`.
pub fn kl_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    probe::hit_kl();
    same_k(p, q)?;
    let kl = p
        .probs()
        .iter()
        .zip(q.probs())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - ln_floor(qi)))
        .sum::<f64>();
    finite(kl)
}

/// `-(1/|Y|) Σ_{y∈Y} ln q_y` for a non-empty label set `Y`.
pub fn multi_label_cross_entropy(labels: &[usize], q: &LabelDistribution) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty label set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= q.k()) {
        return Err(Error::Range { index: bad, k: q.k() });
    }
    let total: f64 = labels.iter().map(|&y| ln_floor(q.probs()[y])).sum();
    finite(-total / labels.len() as f64)
}

/// Loss of `softmax(logits)` against `target` and its gradient with respect
/// to the logits. Both cross-entropy and KL have gradient `q - target`: they
/// differ only by `H(target)`, which does not depend on the logits.
pub fn loss_and_grad_from_logits(
    target: &LabelDistribution,
    logits: &[f64],
    kind: LossKind,
) -> Result<(LossValue, Vec<f64>)> {
    if logits.len() != target.k() {
        return Err(Error::InvalidInput(format!(
            "{} logits for a {}-class target",
            logits.len(),
            target.k()
        )));
    }
    let q = LabelDistribution::from_vec_unchecked(softmax(logits)?);
    let value = match kind {
        LossKind::CrossEntropy => cross_entropy(target, &q)?,
        LossKind::Kl => kl_divergence(target, &q)?,
        LossKind::MultiLabelCe => {
            return Err(Error::InvalidInput(
                "the multi-label objective takes a label set, not logits".into(),
            ))
        }
    };
    let grad = q.probs().iter().zip(target.probs()).map(|(qi, ti)| qi - ti).collect();
    Ok((LossValue { value, kind }, grad))
}
