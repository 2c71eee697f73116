//! Plain mini-batch SGD over either architecture.
//!
//! Each step smooths the batch's hard labels, evaluates the configured
//! objective on `softmax(logits)`, backpropagates the mean per-example
//! gradient and applies `θ ← θ - η·∇`. Baseline runs optimise cross-entropy,
//! every LS level optimises KL divergence.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{argmax, SmoothingLevel, SmoothingSpec};
use crate::losses::{loss_and_grad_from_logits, LossKind};
use crate::models::{Architecture, Model, ModelConfig, Params};
use crate::numerics::{softmax, Rng, Tensor2};
use crate::textpipe::{batch_indices, Dataset, Example};

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: usize = 20;
const EVAL_CHUNK: usize = 256;

pub fn default_learning_rate(arch: Architecture) -> f64 {
    match arch {
        Architecture::TextCnn => 0.1,
        Architecture::Transformer => 0.01,
    }
}

/// Objective paired with a smoothing level: cross-entropy for the baseline,
/// KL divergence for LS1–LS5.
pub fn loss_for_level(level: SmoothingLevel) -> LossKind {
    match level {
        SmoothingLevel::Baseline => LossKind::CrossEntropy,
        _ => LossKind::Kl,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub smoothing: SmoothingSpec,
    pub loss: LossKind,
    pub model: ModelConfig,
    /// Record wall-clock seconds per epoch. Off makes metrics bit-reproducible.
    pub record_time: bool,
}

impl TrainConfig {
    /// Defaults for everything but the smoothing level and model.
    pub fn new(smoothing: SmoothingSpec, model: ModelConfig) -> Self {
        Self {
            learning_rate: default_learning_rate(model.architecture()),
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            loss: loss_for_level(smoothing.level),
            smoothing,
            model,
            record_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if self.loss != loss_for_level(self.smoothing.level) {
            return Err(Error::Config(format!(
                "{} must train with {}, not {}",
                self.smoothing.level,
                loss_for_level(self.smoothing.level).name(),
                self.loss.name()
            )));
        }
        if self.smoothing.k != self.model.classes() {
            return Err(Error::Config(format!(
                "smoothing resolved for {} classes but the model has {}",
                self.smoothing.k,
                self.model.classes()
            )));
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: Vec<MetricsRecord>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub model: Model,
}

/// `θ ← θ - η·g` for every tensor. `eta` must be finite and non-negative.
pub fn sgd_step(model: &mut Model, grads: &Params, eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!(
            "step size {eta} must be finite and non-negative"
        )));
    }
    let grad_tensors = grads.named_tensors();
    {
        let params = model.params().named_tensors();
        if params.len() != grad_tensors.len()
            || params
                .iter()
                .zip(&grad_tensors)
                .any(|((n1, t1), (n2, t2))| n1 != n2 || t1.shape() != t2.shape())
        {
            return Err(Error::Contract("gradients do not match the parameter set".into()));
        }
    }
    for (param, (_, grad)) in model.params_mut().tensors_mut().into_iter().zip(grad_tensors) {
        param.axpy(-eta, grad)?;
    }
    Ok(())
}

fn id_rows<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Vec<&'a [usize]> {
    examples.into_iter().map(|e| e.ids.as_slice()).collect()
}

/// One pass over seeded, shuffled mini-batches (order drawn from
/// `(cfg.seed, epoch)`). Returns the example-weighted mean training loss.
pub fn train_epoch(model: &mut Model, train: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let batches = batch_indices(train.len(), cfg.batch_size, true, cfg.seed, epoch as u64)?;
    let mut total = 0.0;
    for (b, idx) in batches.iter().enumerate() {
        let examples: Vec<&Example> = idx.iter().map(|&i| &train.examples[i]).collect();
        let (logits, cache) = model.forward(&id_rows(examples.iter().copied()))?;
        let scale = 1.0 / examples.len() as f64;
        let mut grad_logits = Tensor2::zeros(examples.len(), logits.cols());
        let mut batch_loss = 0.0;
        for (r, ex) in examples.iter().enumerate() {
            let target = cfg.smoothing.target(ex.label)?;
            let (loss, grad) = match loss_and_grad_from_logits(&target, logits.row(r), cfg.loss) {
                Ok(v) => v,
                Err(Error::InvalidInput(_) | Error::InfiniteLoss) => {
                    return Err(Error::Divergence {
                        batch: b,
                        lr: cfg.learning_rate,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            batch_loss += loss.value;
            for (g, v) in grad_logits.row_mut(r).iter_mut().zip(grad) {
                *g = v * scale;
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::Divergence {
                batch: b,
                lr: cfg.learning_rate,
                loss: batch_loss,
            });
        }
        total += batch_loss;
        let grads = model.backward(&cache, &grad_logits)?;
        sgd_step(model, &grads, cfg.learning_rate)?;
        if !model.params().is_finite() {
            return Err(Error::Divergence {
                batch: b,
                lr: cfg.learning_rate,
                loss: batch_loss,
            });
        }
    }
    Ok(total / train.len() as f64)
}

/// Fraction of rows whose softmax argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if argmax(&softmax(logits.row(r))?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy against the hard labels. No parameters change.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(evaluate_split(model, data, None)?.1)
}

/// Mean objective (when `objective` is given, against smoothed targets) and
/// hard-label accuracy.
pub fn evaluate_split(
    model: &Model,
    data: &Dataset,
    objective: Option<(&SmoothingSpec, LossKind)>,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for chunk in data.examples.chunks(EVAL_CHUNK) {
        let logits = model.logits(&id_rows(chunk))?;
        for (r, ex) in chunk.iter().enumerate() {
            if argmax(&softmax(logits.row(r))?) == ex.label {
                correct += 1;
            }
            if let Some((spec, kind)) = objective {
                loss += loss_and_grad_from_logits(&spec.target(ex.label)?, logits.row(r), kind)?
                    .0
                    .value;
            }
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Initialises a model from `cfg.seed` and trains it for `cfg.epochs` epochs.
pub fn train_run(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<RunResult> {
    train_run_with(train, val, cfg, |_| {})
}

/// [`train_run`] with a callback after every epoch.
pub fn train_run_with<F>(train: &Dataset, val: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<RunResult>
where
    F: FnMut(&MetricsRecord),
{
    cfg.validate()?;
    if train.k != cfg.smoothing.k {
        return Err(Error::Config(format!(
            "dataset has {} classes, configuration expects {}",
            train.k, cfg.smoothing.k
        )));
    }
    let mut model = Model::new(cfg.model.clone(), &mut Rng::new(cfg.seed))?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let train_loss = train_epoch(&mut model, train, cfg, epoch)?;
        let (_, train_accuracy) = evaluate_split(&model, train, None)?;
        let (val_loss, val_accuracy) = evaluate_split(&model, val, Some((&cfg.smoothing, cfg.loss)))?;
        let record = MetricsRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            seconds: cfg.record_time.then(|| start.elapsed().as_secs_f64()),
        };
        on_epoch(&record);
        metrics.push(record);
    }
    let (best_epoch, best_val_accuracy) = metrics.iter().fold((0, f64::NEG_INFINITY), |(be, ba), m| {
        if m.val_accuracy > ba {
            (m.epoch, m.val_accuracy)
        } else {
            (be, ba)
        }
    });
    Ok(RunResult {
        metrics,
        best_val_accuracy,
        best_epoch,
        model,
    })
}

pub const METRICS_HEADER: &str = "epoch,algorithm,split,loss,accuracy,seconds";

/// Per-epoch metrics as CSV: one `train` and one `val` row per epoch. The
/// `seconds` column is empty when timing was not recorded.
pub fn write_metrics_csv<W: Write>(mut w: W, algorithm: &str, metrics: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        let secs = m.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},train,{},{},{}",
            m.epoch, algorithm, m.train_loss, m.train_accuracy, secs
        )?;
        writeln!(
            w,
            "{},{},val,{},{},{}",
            m.epoch, algorithm, m.val_loss, m.val_accuracy, secs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TextCnnConfig;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        // label 1 iff token 2 appears; vocab size 8
        let mut rng = Rng::new(seed);
        let examples = (0..n)
            .map(|i| {
                let label = i % 2;
                let mut ids: Vec<usize> = (0..5).map(|_| 3 + rng.below(5)).collect();
                if label == 1 {
                    ids[rng.below(5)] = 2;
                }
                ids.extend([0, 0]);
                Example { ids, label, raw_len: 5 }
            })
            .collect();
        Dataset {
            examples,
            k: 2,
            label_names: vec!["neg".into(), "pos".into()],
        }
    }

    fn cnn_cfg(level: SmoothingLevel) -> TrainConfig {
        let model = ModelConfig::TextCnn(TextCnnConfig {
            vocab_size: 8,
            classes: 2,
            embed_dim: 6,
            windows: vec![1, 2],
            filters: 4,
        });
        let mut cfg = TrainConfig::new(SmoothingSpec::resolve(level, 2).unwrap(), model);
        cfg.batch_size = 8;
        cfg.epochs = 3;
        cfg.record_time = false;
        cfg
    }

    #[test]
    fn sgd_step_rules() {
        let cfg = cnn_cfg(SmoothingLevel::Ls2);
        let mut model = Model::new(cfg.model.clone(), &mut Rng::new(1)).unwrap();
        let before = model.params().clone();
        sgd_step(&mut model, &before.zeros_like(), 0.5).unwrap();
        assert_eq!(model.params(), &before);

        sgd_step(&mut model, &before, 1.0).unwrap();
        assert!(model
            .params()
            .named_tensors()
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));

        let mut model = Model::new(cfg.model.clone(), &mut Rng::new(2)).unwrap();
        let start = model.params().clone();
        let mut grads = start.zeros_like();
        let mut rng = Rng::new(3);
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
        }
        sgd_step(&mut model, &grads, 0.3).unwrap();
        for ((_, after), ((_, s), (_, g))) in model
            .params()
            .named_tensors()
            .into_iter()
            .zip(start.named_tensors().into_iter().zip(grads.named_tensors()))
        {
            for i in 0..s.data().len() {
                assert!((after.data()[i] - (s.data()[i] - 0.3 * g.data()[i])).abs() <= 1e-15);
            }
        }

        let other = Model::new(
            ModelConfig::TextCnn(TextCnnConfig {
                vocab_size: 9,
                classes: 2,
                embed_dim: 6,
                windows: vec![1, 2],
                filters: 4,
            }),
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(matches!(
            sgd_step(&mut model, other.params(), 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_rate_epoch_changes_nothing() {
        let data = toy_data(24, 1);
        let mut cfg = cnn_cfg(SmoothingLevel::Baseline);
        cfg.learning_rate = 0.0;
        let mut model = Model::new(cfg.model.clone(), &mut Rng::new(0)).unwrap();
        let before = model.params().clone();
        let spec = cfg.smoothing;
        let (initial, _) = evaluate_split(&model, &data, Some((&spec, cfg.loss))).unwrap();
        let mean = train_epoch(&mut model, &data, &cfg, 1).unwrap();
        assert_eq!(model.params(), &before);
        assert!((mean - initial).abs() < 1e-12);
    }

    #[test]
    fn one_small_step_descends() {
        let data = toy_data(16, 2);
        let mut cfg = cnn_cfg(SmoothingLevel::Ls3);
        cfg.batch_size = 16;
        cfg.learning_rate = 0.01;
        let mut model = Model::new(cfg.model.clone(), &mut Rng::new(5)).unwrap();
        let obj = Some((&cfg.smoothing, cfg.loss));
        let (before, _) = evaluate_split(&model, &data, obj).unwrap();
        train_epoch(&mut model, &data, &cfg, 1).unwrap();
        let (after, _) = evaluate_split(&model, &data, obj).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn epochs_are_deterministic() {
        let data = toy_data(40, 3);
        let cfg = cnn_cfg(SmoothingLevel::Ls4);
        let run = || {
            let mut m = Model::new(cfg.model.clone(), &mut Rng::new(cfg.seed)).unwrap();
            train_epoch(&mut m, &data, &cfg, 1).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn evaluate_cases() {
        let data = toy_data(20, 4);
        let cfg = cnn_cfg(SmoothingLevel::Baseline);
        let mut model = Model::new(cfg.model.clone(), &mut Rng::new(0)).unwrap();
        // zero every weight, bias favouring class 1 → constant prediction
        for t in model.params_mut().tensors_mut() {
            t.data_mut().fill(0.0);
        }
        if let Params::TextCnn(p) = model.params_mut() {
            p.b_y.data_mut()[1] = 1.0;
        }
        let ones = Dataset {
            examples: data.examples.iter().filter(|e| e.label == 1).cloned().collect(),
            ..data.clone()
        };
        assert_eq!(evaluate(&model, &ones).unwrap(), 1.0);
        assert_eq!(evaluate(&model, &data).unwrap(), evaluate(&model, &data).unwrap());
        assert!(evaluate(
            &model,
            &Dataset {
                examples: vec![],
                ..data
            }
        )
        .is_err());
    }

    #[test]
    fn random_logits_score_near_chance() {
        let mut rng = Rng::new(77);
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let logits = Tensor2::from_vec(n, 2, (0..2 * n).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
        let acc = accuracy_from_logits(&logits, &labels).unwrap();
        assert!((acc - 0.5).abs() <= 0.03, "{acc}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = cnn_cfg(SmoothingLevel::Baseline);
        assert!(cfg.validate().is_ok());
        cfg.loss = LossKind::Kl;
        assert!(cfg.validate().is_err());
        let mut cfg = cnn_cfg(SmoothingLevel::Ls1);
        assert_eq!(cfg.loss, LossKind::Kl);
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = cnn_cfg(SmoothingLevel::Ls1);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_records_every_epoch() {
        let data = toy_data(40, 5);
        let mut cfg = cnn_cfg(SmoothingLevel::Ls2);
        cfg.epochs = 1;
        let r = train_run(&data, &data, &cfg).unwrap();
        assert_eq!(r.metrics.len(), 1);
        assert_eq!(r.metrics[0].epoch, 1);
        cfg.epochs = 4;
        let r = train_run(&data, &data, &cfg).unwrap();
        assert_eq!(r.metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let max = r.metrics.iter().map(|m| m.val_accuracy).fold(0.0, f64::max);
        assert_eq!(r.best_val_accuracy, max);
        assert_eq!(r.metrics[r.best_epoch - 1].val_accuracy, max);
        assert!(r
            .metrics
            .iter()
            .all(|m| (0.0..=1.0).contains(&m.val_accuracy) && m.seconds.is_none()));
    }

    #[test]
    fn metrics_csv_layout() {
        let m = MetricsRecord {
            epoch: 1,
            train_loss: 0.5,
            train_accuracy: 0.75,
            val_loss: 0.25,
            val_accuracy: 1.0,
            seconds: None,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, "LS2", &[m]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,algorithm,split,loss,accuracy,seconds\n1,LS2,train,0.5,0.75,\n1,LS2,val,0.25,1,\n"
        );
    }
}
