//! Trainable classifiers over padded token-id sequences.
//!
//! Both architectures run forward one example at a time, cache what the
//! backward pass needs, and accumulate parameter gradients by hand. PAD
//! positions never contribute: TextCNN only convolves windows made entirely
//! of real tokens, and the encoder drops PAD positions before attention and
//! pooling (equivalent to masking PAD keys and PAD pooling slots).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2};

pub mod textcnn;
pub mod transformer;

pub use textcnn::{textcnn_forward, TextCnnConfig, TextCnnParams};
pub use transformer::{
    ffn, multi_head_attention, scaled_dot_attention, transformer_forward, TransformerConfig, TransformerParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    TextCnn,
    Transformer,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::TextCnn => "textcnn",
            Architecture::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "textcnn" => Ok(Architecture::TextCnn),
            "transformer" => Ok(Architecture::Transformer),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    TextCnn(TextCnnConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::TextCnn(_) => Architecture::TextCnn,
            ModelConfig::Transformer(_) => Architecture::Transformer,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelConfig::TextCnn(c) => c.classes,
            ModelConfig::Transformer(c) => c.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::TextCnn(c) => c.validate(),
            ModelConfig::Transformer(c) => c.validate(),
        }
    }
}

/// Parameters, or parameter-shaped gradients, of either architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    TextCnn(TextCnnParams),
    Transformer(TransformerParams),
}

impl Params {
    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        match self {
            Params::TextCnn(p) => p.named_tensors(),
            Params::Transformer(p) => p.named_tensors(),
        }
    }

    /// Mutable tensors in the same order as [`Params::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        match self {
            Params::TextCnn(p) => p.tensors_mut(),
            Params::Transformer(p) => p.tensors_mut(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.data().len()).sum()
    }
}

/// Activations from one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    arch: Architecture,
    generation: u64,
    inner: CacheInner,
}

#[derive(Clone, Debug)]
enum CacheInner {
    TextCnn(Vec<textcnn::ExampleCache>),
    Transformer(Vec<transformer::ExampleCache>),
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        match &self.inner {
            CacheInner::TextCnn(v) => v.len(),
            CacheInner::Transformer(v) => v.len(),
        }
    }
}

/// A configured classifier and its parameters.
///
/// `generation` counts parameter updates so a stale [`ForwardCache`] is
/// rejected by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    generation: u64,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = match &config {
            ModelConfig::TextCnn(c) => Params::TextCnn(TextCnnParams::init(c, rng)?),
            ModelConfig::Transformer(c) => Params::Transformer(TransformerParams::init(c, rng)?),
        };
        Ok(Self {
            config,
            params,
            generation: 0,
        })
    }

    /// Wraps existing parameters, checking every shape against `config`.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        let reference = Model::new(config.clone(), &mut Rng::new(0))?;
        let want = reference.params.named_tensors();
        let got = params.named_tensors();
        if want.len() != got.len()
            || want
                .iter()
                .zip(&got)
                .any(|((n1, t1), (n2, t2))| n1 != n2 || t1.shape() != t2.shape())
        {
            return Err(Error::InvalidInput(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            generation: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut Params {
        self.generation += 1;
        &mut self.params
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Logits (`batch × classes`) and the cache for [`Model::backward`].
    pub fn forward(&self, batch: &[&[usize]]) -> Result<(Tensor2, ForwardCache)> {
        let (logits, inner) = match (&self.config, &self.params) {
            (ModelConfig::TextCnn(c), Params::TextCnn(p)) => {
                let (l, cache) = textcnn::forward_batch(c, p, batch)?;
                (l, CacheInner::TextCnn(cache))
            }
            (ModelConfig::Transformer(c), Params::Transformer(p)) => {
                let (l, cache) = transformer::forward_batch(c, p, batch)?;
                (l, CacheInner::Transformer(cache))
            }
            _ => unreachable!("config and params built together"),
        };
        Ok((
            logits,
            ForwardCache {
                arch: self.architecture(),
                generation: self.generation,
                inner,
            },
        ))
    }

    /// Logits only.
    pub fn logits(&self, batch: &[&[usize]]) -> Result<Tensor2> {
        Ok(self.forward(batch)?.0)
    }

    /// Gradients of `Σ_b grad_logits[b] · logits[b]` with respect to every
    /// parameter, i.e. the chain rule applied from the logits back.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor2) -> Result<Params> {
        model_backward(self, cache, grad_logits)
    }

    /// Pooled features fed to the classifier head, one row per example.
    pub fn features(&self, batch: &[&[usize]]) -> Result<Tensor2> {
        extract_penultimate(self, batch)
    }

    /// Applies the classifier head to pooled features.
    pub fn classify_features(&self, features: &Tensor2) -> Result<Tensor2> {
        let (w_y, b_y) = match &self.params {
            Params::TextCnn(p) => (&p.w_y, &p.b_y),
            Params::Transformer(p) => (&p.w_y, &p.b_y),
        };
        let mut logits = crate::numerics::matmul_nt(features, w_y)?;
        logits.add_row_broadcast(b_y.data());
        Ok(logits)
    }
}

/// See [`Model::backward`].
pub fn model_backward(model: &Model, cache: &ForwardCache, grad_logits: &Tensor2) -> Result<Params> {
    if cache.arch != model.architecture() || cache.generation != model.generation {
        return Err(Error::Contract(format!(
            "forward cache from {} generation {} used with {} generation {}",
            cache.arch,
            cache.generation,
            model.architecture(),
            model.generation
        )));
    }
    let k = model.config.classes();
    if grad_logits.shape() != (cache.batch_size(), k) {
        return Err(Error::Dimension {
            op: "model_backward",
            left: grad_logits.shape(),
            right: (cache.batch_size(), k),
        });
    }
    match (&model.config, &model.params, &cache.inner) {
        (ModelConfig::TextCnn(c), Params::TextCnn(p), CacheInner::TextCnn(ex)) => {
            Ok(Params::TextCnn(textcnn::backward_batch(c, p, ex, grad_logits)))
        }
        (ModelConfig::Transformer(c), Params::Transformer(p), CacheInner::Transformer(ex)) => {
            Ok(Params::Transformer(transformer::backward_batch(c, p, ex, grad_logits)?))
        }
        _ => Err(Error::Contract("cache does not belong to this model".into())),
    }
}

/// See [`Model::features`].
pub fn extract_penultimate(model: &Model, batch: &[&[usize]]) -> Result<Tensor2> {
    let (_, cache) = model.forward(batch)?;
    let rows: Vec<Vec<f64>> = match &cache.inner {
        CacheInner::TextCnn(v) => v.iter().map(|c| c.pooled.clone()).collect(),
        CacheInner::Transformer(v) => v.iter().map(|c| c.pooled.clone()).collect(),
    };
    let cols = match &model.config {
        ModelConfig::TextCnn(c) => c.feature_dim(),
        ModelConfig::Transformer(c) => c.d_model,
    };
    Tensor2::from_vec(rows.len(), cols, rows.concat())
}

pub(crate) fn check_ids(ids: &[usize], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab_size) {
        Some(&id) => Err(Error::InvalidInput(format!(
            "token id {id} outside vocabulary of size {vocab_size}"
        ))),
        None => Ok(()),
    }
}

/// `U(-bound, bound)` initialisation.
pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Result<Tensor2> {
    crate::numerics::seeded_init(rows, cols, -bound, bound, rng)
}

/// Index of the first maximum.
pub(crate) fn first_argmax<I: IntoIterator<Item = f64>>(values: I) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Architecture) -> Model {
        let cfg = match arch {
            Architecture::TextCnn => ModelConfig::TextCnn(TextCnnConfig {
                vocab_size: 10,
                classes: 3,
                embed_dim: 4,
                windows: vec![2, 3],
                filters: 3,
            }),
            Architecture::Transformer => ModelConfig::Transformer(TransformerConfig {
                vocab_size: 10,
                classes: 3,
                max_len: 6,
                d_model: 8,
                heads: 2,
                layers: 1,
                ffn_dim: 12,
                residual_norm: true,
            }),
        };
        Model::new(cfg, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn names_and_mut_order_agree() {
        for arch in [Architecture::TextCnn, Architecture::Transformer] {
            let mut m = tiny(arch);
            let shapes: Vec<(usize, usize)> = m.params().named_tensors().iter().map(|(_, t)| t.shape()).collect();
            let mut_shapes: Vec<(usize, usize)> = m.params_mut().tensors_mut().iter().map(|t| t.shape()).collect();
            assert_eq!(shapes, mut_shapes);
            let names: Vec<String> = m.params().named_tensors().into_iter().map(|(n, _)| n).collect();
            let unique: std::collections::BTreeSet<_> = names.iter().collect();
            assert_eq!(unique.len(), names.len());
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = tiny(Architecture::TextCnn);
        let ids = [2usize, 3, 4, 5, 0, 0];
        let (_, cache) = m.forward(&[&ids]).unwrap();
        m.params_mut();
        let err = m.backward(&cache, &Tensor2::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let other = tiny(Architecture::Transformer);
        let (_, cache) = other.forward(&[&ids]).unwrap();
        assert!(matches!(
            tiny(Architecture::TextCnn).backward(&cache, &Tensor2::zeros(1, 3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for arch in [Architecture::TextCnn, Architecture::Transformer] {
            let m = tiny(arch);
            let a = [2usize, 3, 4, 5, 0, 0];
            let b = [6usize, 7, 8, 0, 0, 0];
            let (_, cache) = m.forward(&[&a, &b]).unwrap();
            let g = m.backward(&cache, &Tensor2::zeros(2, 3)).unwrap();
            assert!(g
                .named_tensors()
                .iter()
                .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn features_feed_the_head() {
        for arch in [Architecture::TextCnn, Architecture::Transformer] {
            let m = tiny(arch);
            let a = [2usize, 3, 4, 5, 0, 0];
            let b = [6usize, 7, 8, 9, 1, 0];
            let feats = m.features(&[&a, &b]).unwrap();
            let want_cols = match arch {
                Architecture::TextCnn => 6,
                Architecture::Transformer => 8,
            };
            assert_eq!(feats.shape(), (2, want_cols));
            let via_head = m.classify_features(&feats).unwrap();
            let direct = m.logits(&[&a, &b]).unwrap();
            for (x, y) in via_head.data().iter().zip(direct.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = tiny(Architecture::Transformer);
        assert!(Model::from_params(m.config().clone(), m.params().clone()).is_ok());
        let other = tiny(Architecture::TextCnn);
        assert!(Model::from_params(m.config().clone(), other.params().clone()).is_err());
    }

    #[test]
    fn out_of_vocab_ids_are_rejected() {
        for arch in [Architecture::TextCnn, Architecture::Transformer] {
            let ids = [2usize, 30, 0, 0, 0, 0];
            assert!(tiny(arch).forward(&[&ids]).is_err());
        }
    }
}
