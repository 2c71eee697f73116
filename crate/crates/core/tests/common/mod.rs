#![allow(dead_code)]

use smoothlab::labels::{one_hot, smooth, LabelDistribution};
use smoothlab::losses::{loss_and_grad_from_logits, LossKind};
use smoothlab::models::{Model, ModelConfig, Params, TextCnnConfig, TransformerConfig};
use smoothlab::numerics::{finite_diff_grad, Rng, Tensor2, DEFAULT_FD_EPS};

pub const GRAD_TOL: f64 = 1e-5;

pub fn tiny_textcnn() -> ModelConfig {
    ModelConfig::TextCnn(TextCnnConfig {
        vocab_size: 12,
        classes: 3,
        embed_dim: 4,
        windows: vec![2, 3],
        filters: 3,
    })
}

/// Attention and feed-forward only, no residual or normalisation.
pub fn tiny_transformer_literal() -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        vocab_size: 12,
        classes: 3,
        max_len: 6,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_dim: 6,
        residual_norm: false,
    })
}

pub fn tiny_transformer_residual() -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        vocab_size: 12,
        classes: 3,
        max_len: 6,
        d_model: 8,
        heads: 2,
        layers: 2,
        ffn_dim: 6,
        residual_norm: true,
    })
}

/// Four sequences of length 6 with trailing PAD, and smoothed targets.
pub fn random_batch(seed: u64) -> (Vec<Vec<usize>>, Vec<LabelDistribution>) {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    for len in [6, 5, 4, 6] {
        let mut seq: Vec<usize> = (0..len).map(|_| 2 + rng.below(10)).collect();
        seq.resize(6, 0);
        ids.push(seq);
        targets.push(smooth(&one_hot(rng.below(3), 3).unwrap(), 0.05).unwrap());
    }
    (ids, targets)
}

pub fn batch_loss(model: &Model, ids: &[Vec<usize>], targets: &[LabelDistribution], kind: LossKind) -> f64 {
    let batch: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let logits = model.logits(&batch).unwrap();
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, t)| loss_and_grad_from_logits(t, logits.row(i), kind).unwrap().0.value)
        .sum();
    total / ids.len() as f64
}

pub fn analytic_grads(model: &Model, ids: &[Vec<usize>], targets: &[LabelDistribution], kind: LossKind) -> Params {
    let batch: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let (logits, cache) = model.forward(&batch).unwrap();
    let mut upstream = Tensor2::zeros(logits.rows(), logits.cols());
    for (i, t) in targets.iter().enumerate() {
        let (_, g) = loss_and_grad_from_logits(t, logits.row(i), kind).unwrap();
        for (slot, v) in upstream.row_mut(i).iter_mut().zip(g) {
            *slot = v / ids.len() as f64;
        }
    }
    model.backward(&cache, &upstream).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.
pub fn relative_error(a: &Tensor2, n: &Tensor2) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(n.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(n.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error of every parameter tensor's analytic gradient against
/// central differences.
pub fn gradient_errors(config: ModelConfig, seed: u64) -> Vec<(String, f64)> {
    let model = Model::new(config.clone(), &mut Rng::new(seed)).unwrap();
    let (ids, targets) = random_batch(seed);
    let kind = LossKind::Kl;
    let grads = analytic_grads(&model, &ids, &targets, kind);
    let names: Vec<String> = grads.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Tensor2> = grads.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();

    let mut out = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let x = model.params().named_tensors()[i].1.clone();
        let numeric = finite_diff_grad(
            |xp| {
                let mut params = model.params().clone();
                *params.tensors_mut()[i] = xp.clone();
                let m = Model::from_params(config.clone(), params)?;
                Ok(batch_loss(&m, &ids, &targets, kind))
            },
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        out.push((name, relative_error(&analytic[i], &numeric)));
    }
    out
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
}
