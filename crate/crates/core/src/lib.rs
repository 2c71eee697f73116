//! Label-smoothed text sentiment classification.
//!
//! The crate is organised bottom-up:
//!
//! ```text
//! numerics  dense tensors, stable softmax, seeded RNG, finite differences
//! labels    one-hot / smoothed label distributions, smoothing levels
//! losses    entropy, cross-entropy, KL divergence, fused logits gradient
//! textpipe  tokenizer, vocabulary, dataset loading, splits, batches
//! models    TextCNN and a small transformer encoder with manual backprop
//! trainer   plain SGD loop, per-epoch metrics, evaluation
//! expcli    config files, smoothing-level sweeps, curves, PCA projection
//! ```
//!
//! Smoothing turns a hard label `d` over `k` classes into
//! `(1 - k·λ)·d + λ`, and training minimises `KL(smoothed ‖ softmax(logits))`.
//! The unsmoothed baseline minimises plain cross-entropy instead.

pub mod checkpoint;
pub mod error;
pub mod expcli;
pub mod labels;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod textpipe;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{LabelDistribution, SmoothingLevel, SmoothingSpec};
pub use losses::{LossKind, LossValue};
pub use models::{Architecture, Model, ModelConfig};
pub use numerics::{Rng, Tensor2};
pub use textpipe::{Dataset, Example, Vocabulary};
pub use trainer::{MetricsRecord, RunResult, TrainConfig};
