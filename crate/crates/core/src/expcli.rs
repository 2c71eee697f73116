//! Experiment driver: config files, smoothing-level sweeps, result tables,
//! validation curves and 2-D projections of penultimate features.
//!
//! Config files are flat `key = value` text; `#` starts a comment. Lists are
//! comma separated. Relative dataset paths resolve against the directory of
//! the config file, `out.dir` against the working directory. The
//! `SMOOTHLAB_OUT_DIR` environment variable overrides `out.dir`.
//!
//! A sweep writes into `out.dir`:
//!
//! ```text
//! results.csv              one row per (dataset, architecture, algorithm, seed)
//! curves-seed{s}.csv       validation accuracy per epoch, one file per seed
//! runs/{cell}.csv          per-epoch train/val metrics of every run
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::labels::{level_to_lambda, SmoothingLevel, SmoothingSpec};
use crate::models::{extract_penultimate, Architecture, Model, ModelConfig, TextCnnConfig, TransformerConfig};
use crate::numerics::{dot, matmul, matmul_tn, Tensor2};
use crate::textpipe::{
    build_vocab, load_dataset, split_dataset, Dataset, Format, LabeledText, Vocabulary, DEFAULT_MAX_LEN,
};
use crate::trainer::{
    train_run_with, write_metrics_csv, MetricsRecord, RunResult, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
};

pub const OUT_DIR_ENV: &str = "SMOOTHLAB_OUT_DIR";
pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_HEADER: [&str; 9] = [
    "dataset",
    "architecture",
    "algorithm",
    "seed",
    "lambda",
    "best_val_accuracy",
    "best_epoch",
    "best",
    "status",
];
pub const CURVES_HEADER: [&str; 5] = ["dataset", "architecture", "algorithm", "epoch", "val_accuracy"];
pub const PROJECTION_HEADER: [&str; 3] = ["x", "y", "label"];

const FEATURE_CHUNK: usize = 256;
const POWER_ITERATIONS: usize = 1000;
const POWER_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub path: PathBuf,
    /// `None` infers the format from the file extension.
    pub format: Option<Format>,
    pub text_field: String,
    pub label_field: String,
}

impl DatasetSpec {
    /// File stem, used to name output rows and files.
    pub fn name(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }

    pub fn load(&self) -> Result<Dataset<LabeledText>> {
        let format = match self.format {
            Some(f) => f,
            None => Format::from_path(&self.path)?,
        };
        load_dataset(&self.path, format, &self.text_field, &self.label_field)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub filters: usize,
    pub windows: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub residual_norm: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let cnn = TextCnnConfig::new(2, 2);
        let tf = TransformerConfig::new(2, 2, DEFAULT_MAX_LEN);
        Self {
            embed_dim: cnn.embed_dim,
            filters: cnn.filters,
            windows: cnn.windows,
            d_model: tf.d_model,
            heads: tf.heads,
            layers: tf.layers,
            ffn_dim: tf.ffn_dim,
            residual_norm: tf.residual_norm,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, arch: Architecture, vocab_size: usize, classes: usize, max_len: usize) -> ModelConfig {
        match arch {
            Architecture::TextCnn => ModelConfig::TextCnn(TextCnnConfig {
                vocab_size,
                classes,
                embed_dim: self.embed_dim,
                windows: self.windows.clone(),
                filters: self.filters,
            }),
            Architecture::Transformer => ModelConfig::Transformer(TransformerConfig {
                vocab_size,
                classes,
                max_len,
                d_model: self.d_model,
                heads: self.heads,
                layers: self.layers,
                ffn_dim: self.ffn_dim,
                residual_norm: self.residual_norm,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    /// Applies to both architectures unless a per-architecture rate is set.
    pub lr: Option<f64>,
    pub lr_textcnn: Option<f64>,
    pub lr_transformer: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub record_time: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: None,
            lr_textcnn: None,
            lr_transformer: None,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            record_time: false,
        }
    }
}

impl TrainSettings {
    pub fn learning_rate(&self, arch: Architecture) -> f64 {
        let specific = match arch {
            Architecture::TextCnn => self.lr_textcnn,
            Architecture::Transformer => self.lr_transformer,
        };
        specific
            .or(self.lr)
            .unwrap_or_else(|| crate::trainer::default_learning_rate(arch))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub max_len: usize,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub min_freq: usize,
    pub max_vocab: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_LEN,
            val_fraction: 0.2,
            split_seed: 0,
            min_freq: 1,
            max_vocab: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub datasets: Vec<DatasetSpec>,
    pub architectures: Vec<Architecture>,
    pub levels: Vec<SmoothingLevel>,
    /// Explicit λ per level, overriding the built-in table.
    pub lambdas: BTreeMap<SmoothingLevel, f64>,
    pub seeds: Vec<u64>,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub data: DataSettings,
    /// 0 uses one worker per CPU.
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl SweepConfig {
    /// Parses config text. `base_dir` anchors relative dataset paths.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim().to_string();
            if kv.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        Self::from_pairs(kv, base_dir)
    }

    /// Reads a config file, then applies the output-directory override.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.out_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    fn from_pairs(mut kv: BTreeMap<String, String>, base_dir: &Path) -> Result<Self> {
        let mut take = |key: &str| kv.remove(key);

        let paths = take("dataset.path").ok_or_else(|| Error::Config("dataset.path is required".into()))?;
        let format = take("dataset.format").map(|f| f.parse::<Format>()).transpose()?;
        let text_field = take("dataset.text_field").unwrap_or_else(|| "text".into());
        let label_field = take("dataset.label_field").unwrap_or_else(|| "label".into());
        let datasets = list(&paths)
            .into_iter()
            .map(|p| DatasetSpec {
                path: base_dir.join(p),
                format,
                text_field: text_field.clone(),
                label_field: label_field.clone(),
            })
            .collect();

        let architectures = match take("model.arch") {
            Some(v) => parse_list(&v, "model.arch")?,
            None => vec![Architecture::TextCnn, Architecture::Transformer],
        };
        let levels = match take("smooth.levels") {
            Some(v) if v.trim().eq_ignore_ascii_case("all") => SmoothingLevel::ALL.to_vec(),
            Some(v) => parse_list(&v, "smooth.levels")?,
            None => SmoothingLevel::ALL.to_vec(),
        };
        let seeds = match take("seed.list") {
            Some(v) => parse_list(&v, "seed.list")?,
            None => vec![0],
        };

        let mut model = ModelSettings::default();
        set(&mut model.embed_dim, take("model.embed_dim"), "model.embed_dim")?;
        set(&mut model.filters, take("model.filters"), "model.filters")?;
        if let Some(v) = take("model.windows") {
            model.windows = parse_list(&v, "model.windows")?;
        }
        set(&mut model.d_model, take("model.d_model"), "model.d_model")?;
        set(&mut model.heads, take("model.heads"), "model.heads")?;
        set(&mut model.layers, take("model.layers"), "model.layers")?;
        set(&mut model.ffn_dim, take("model.ffn_dim"), "model.ffn_dim")?;
        set(
            &mut model.residual_norm,
            take("model.residual_norm"),
            "model.residual_norm",
        )?;

        let mut train = TrainSettings {
            lr: opt(take("train.lr"), "train.lr")?,
            lr_textcnn: opt(take("train.lr.textcnn"), "train.lr.textcnn")?,
            lr_transformer: opt(take("train.lr.transformer"), "train.lr.transformer")?,
            ..TrainSettings::default()
        };
        set(&mut train.epochs, take("train.epochs"), "train.epochs")?;
        set(&mut train.batch_size, take("train.batch_size"), "train.batch_size")?;
        set(&mut train.record_time, take("out.timing"), "out.timing")?;

        let mut data = DataSettings::default();
        set(&mut data.max_len, take("data.max_len"), "data.max_len")?;
        set(&mut data.val_fraction, take("data.val_fraction"), "data.val_fraction")?;
        set(&mut data.split_seed, take("data.split_seed"), "data.split_seed")?;
        set(&mut data.min_freq, take("data.min_freq"), "data.min_freq")?;
        set(&mut data.max_vocab, take("data.max_vocab"), "data.max_vocab")?;

        let mut workers = 0;
        set(&mut workers, take("sweep.workers"), "sweep.workers")?;
        let out_dir = PathBuf::from(take("out.dir").unwrap_or_else(|| "out".into()));

        let mut lambdas = BTreeMap::new();
        let lambda_keys: Vec<String> = kv.keys().filter(|k| k.starts_with("smooth.lambda.")).cloned().collect();
        for key in lambda_keys {
            let value = kv.remove(&key).expect("key listed above");
            let level: SmoothingLevel = key["smooth.lambda.".len()..].parse()?;
            let lambda: f64 = parse_value(&value, &key)?;
            lambdas.insert(level, lambda);
        }
        if let Some(key) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key {key}")));
        }

        let cfg = Self {
            datasets,
            architectures,
            levels,
            lambdas,
            seeds,
            model,
            train,
            data,
            workers,
            out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.architectures.is_empty() || self.levels.is_empty() || self.seeds.is_empty()
        {
            return Err(Error::Config(
                "dataset.path, model.arch, smooth.levels and seed.list must be non-empty".into(),
            ));
        }
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !names.insert(d.name()) {
                return Err(Error::Config(format!("two datasets share the name {:?}", d.name())));
            }
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.val_fraction {} not in (0, 1)",
                self.data.val_fraction
            )));
        }
        if self.data.max_len == 0 || self.data.max_vocab < 3 || self.data.min_freq == 0 {
            return Err(Error::Config(
                "data.max_len, data.min_freq must be positive and data.max_vocab at least 3".into(),
            ));
        }
        for &arch in &self.architectures {
            let lr = self.train.learning_rate(arch);
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "learning rate for {arch} must be positive, got {lr}"
                )));
            }
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config(
                "train.epochs and train.batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// λ for `level` on a `k`-class dataset.
    pub fn lambda_for(&self, level: SmoothingLevel, k: usize) -> Result<f64> {
        match self.lambdas.get(&level) {
            Some(&l) => Ok(l),
            None => level_to_lambda(level, k)
                .map_err(|e| Error::Config(format!("{e} (set smooth.lambda.{})", level.name().to_ascii_lowercase()))),
        }
    }

    pub fn train_config(
        &self,
        data: &PreparedData,
        arch: Architecture,
        level: SmoothingLevel,
        seed: u64,
    ) -> Result<TrainConfig> {
        let k = data.train.k;
        let smoothing = SmoothingSpec::with_lambda(level, k, self.lambda_for(level, k)?)?;
        let model = self.model.model_config(arch, data.vocab.len(), k, self.data.max_len);
        let mut cfg = TrainConfig::new(smoothing, model);
        cfg.learning_rate = self.train.learning_rate(arch);
        cfg.batch_size = self.train.batch_size;
        cfg.epochs = self.train.epochs;
        cfg.seed = seed;
        cfg.record_time = self.train.record_time;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse_value<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    list(v).into_iter().map(|s| parse_value(s, key)).collect()
}

fn set<T: FromStr>(slot: &mut T, v: Option<String>, key: &str) -> Result<()> {
    if let Some(v) = v {
        *slot = parse_value(&v, key)?;
    }
    Ok(())
}

fn opt<T: FromStr>(v: Option<String>, key: &str) -> Result<Option<T>> {
    v.map(|v| parse_value(&v, key)).transpose()
}

/// A dataset split, with the vocabulary built from its training part.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub name: String,
    pub train: Dataset,
    pub val: Dataset,
    pub vocab: Vocabulary,
}

pub fn prepare_dataset(spec: &DatasetSpec, settings: &DataSettings) -> Result<PreparedData> {
    let raw = spec.load()?;
    let (train, val) = split_dataset(&raw, settings.val_fraction, settings.split_seed)?;
    let corpus: Vec<&Vec<String>> = train.examples.iter().map(|e| &e.tokens).collect();
    let corpus: Vec<Vec<&str>> = corpus.iter().map(|t| t.iter().map(String::as_str).collect()).collect();
    let vocab = build_vocab(&corpus, settings.min_freq, settings.max_vocab)?;
    Ok(PreparedData {
        name: spec.name(),
        train: train.encode(&vocab, settings.max_len)?,
        val: val.encode(&vocab, settings.max_len)?,
        vocab,
    })
}

/// One trained model and its checkpoint, as produced by the `train` command.
#[derive(Clone, Debug)]
pub struct SingleRun {
    pub dataset: String,
    pub result: RunResult,
    pub checkpoint: Checkpoint,
}

/// Trains the cell (`dataset`, `arch`, `level`, `seed`) of a sweep config.
pub fn run_single(
    cfg: &SweepConfig,
    dataset: usize,
    arch: Architecture,
    level: SmoothingLevel,
    seed: u64,
    on_epoch: impl FnMut(&MetricsRecord),
) -> Result<SingleRun> {
    let spec = cfg
        .datasets
        .get(dataset)
        .ok_or_else(|| Error::Config(format!("dataset index {dataset} out of range")))?;
    let data = prepare_dataset(spec, &cfg.data)?;
    let tc = cfg.train_config(&data, arch, level, seed)?;
    let result = train_run_with(&data.train, &data.val, &tc, on_epoch)?;
    let checkpoint = Checkpoint {
        model: result.model.clone(),
        vocab: data.vocab.clone(),
        label_names: data.train.label_names.clone(),
        max_len: cfg.data.max_len,
        algorithm: level.name().to_string(),
        seed,
    };
    Ok(SingleRun {
        dataset: data.name,
        result,
        checkpoint,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub architecture: Architecture,
    pub algorithm: SmoothingLevel,
    pub seed: u64,
    pub lambda: f64,
    /// `None` when the run failed.
    pub best_val_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Set on every row of the algorithm with the highest mean best accuracy
    /// over seeds within its (dataset, architecture) group.
    pub is_best: bool,
    pub status: RunStatus,
    /// Completed epochs; partial when the run failed.
    pub metrics: Vec<MetricsRecord>,
}

impl ResultRow {
    pub fn run_name(&self) -> String {
        format!(
            "{}__{}__{}__seed{}",
            self.dataset,
            self.architecture.name(),
            self.algorithm.name(),
            self.seed
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    fn mark_best(&mut self) {
        // (dataset, architecture) -> [(algorithm, accuracy sum, runs)]
        type Totals = Vec<(SmoothingLevel, f64, usize)>;
        let mut groups: BTreeMap<(String, Architecture), Totals> = BTreeMap::new();
        for row in &self.rows {
            if let Some(acc) = row.best_val_accuracy.filter(|_| row.status == RunStatus::Ok) {
                let g = groups.entry((row.dataset.clone(), row.architecture)).or_default();
                match g.iter_mut().find(|(l, _, _)| *l == row.algorithm) {
                    Some(e) => {
                        e.1 += acc;
                        e.2 += 1;
                    }
                    None => g.push((row.algorithm, acc, 1)),
                }
            }
        }
        let winners: HashSet<(String, Architecture, SmoothingLevel)> = groups
            .into_iter()
            .filter_map(|((d, a), algos)| {
                let mut best: Option<(SmoothingLevel, f64)> = None;
                for (l, sum, n) in algos {
                    let mean = sum / n as f64;
                    if best.is_none_or(|(_, m)| mean > m) {
                        best = Some((l, mean));
                    }
                }
                best.map(|(l, _)| (d, a, l))
            })
            .collect();
        for row in &mut self.rows {
            row.is_best = winners.contains(&(row.dataset.clone(), row.architecture, row.algorithm));
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(RESULTS_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let status = match &r.status {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Failed(why) => format!("failed: {why}"),
            };
            w.write_record([
                r.dataset.clone(),
                r.architecture.name().to_string(),
                r.algorithm.name().to_string(),
                r.seed.to_string(),
                r.lambda.to_string(),
                r.best_val_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                r.is_best.to_string(),
                status,
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}

struct Cell {
    data: usize,
    arch: Architecture,
    level: SmoothingLevel,
    seed: u64,
}

/// [`run_sweep_with`] without progress reporting.
pub fn run_sweep(cfg: &SweepConfig) -> Result<ResultTable> {
    run_sweep_with(cfg, |_| {})
}

/// Trains every (dataset, architecture, algorithm, seed) cell and writes the
/// results table, curves and per-run metrics under `cfg.out_dir`. A run that
/// fails becomes a failed row; the other cells still run. `on_done` is called
/// from worker threads as cells finish.
pub fn run_sweep_with<F>(cfg: &SweepConfig, on_done: F) -> Result<ResultTable>
where
    F: Fn(&ResultRow) + Sync,
{
    cfg.validate()?;
    let data = cfg
        .datasets
        .iter()
        .map(|spec| prepare_dataset(spec, &cfg.data))
        .collect::<Result<Vec<_>>>()?;
    // Resolve every λ up front: a missing table entry is a config error, not a failed run.
    for d in &data {
        for &level in &cfg.levels {
            SmoothingSpec::with_lambda(level, d.train.k, cfg.lambda_for(level, d.train.k)?)?;
        }
    }

    let runs_dir = cfg.out_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;

    let mut cells = Vec::new();
    for (di, _) in data.iter().enumerate() {
        for &arch in &cfg.architectures {
            for &level in &cfg.levels {
                for &seed in &cfg.seeds {
                    cells.push(Cell {
                        data: di,
                        arch,
                        level,
                        seed,
                    });
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows: Vec<Result<ResultRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let row = run_cell(cfg, &data[cell.data], cell)?;
                let file = fs::File::create(runs_dir.join(format!("{}.csv", row.run_name())))?;
                write_metrics_csv(std::io::BufWriter::new(file), row.algorithm.name(), &row.metrics)?;
                on_done(&row);
                Ok(row)
            })
            .collect()
    });
    let mut table = ResultTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
    };
    table.mark_best();
    table.write_csv(&cfg.out_dir.join(RESULTS_FILE))?;

    for &seed in &cfg.seeds {
        let series: Vec<CurveSeries> = table
            .rows
            .iter()
            .filter(|r| r.seed == seed && !r.metrics.is_empty())
            .map(CurveSeries::from)
            .collect();
        if !series.is_empty() {
            emit_curves(&series, &cfg.out_dir.join(curves_file_name(seed)))?;
        }
    }
    Ok(table)
}

pub fn curves_file_name(seed: u64) -> String {
    format!("curves-seed{seed}.csv")
}

fn run_cell(cfg: &SweepConfig, data: &PreparedData, cell: &Cell) -> Result<ResultRow> {
    let tc = cfg.train_config(data, cell.arch, cell.level, cell.seed)?;
    let mut metrics = Vec::new();
    let outcome = train_run_with(&data.train, &data.val, &tc, |m| metrics.push(m.clone()));
    let (best_val_accuracy, best_epoch, status) = match outcome {
        Ok(run) => (Some(run.best_val_accuracy), Some(run.best_epoch), RunStatus::Ok),
        Err(e) => (None, None, RunStatus::Failed(e.to_string())),
    };
    Ok(ResultRow {
        dataset: data.name.clone(),
        architecture: cell.arch,
        algorithm: cell.level,
        seed: cell.seed,
        lambda: tc.smoothing.lambda,
        best_val_accuracy,
        best_epoch,
        is_best: false,
        status,
        metrics,
    })
}

/// Validation-accuracy trajectory of one run.
#[derive(Clone, Copy, Debug)]
pub struct CurveSeries<'a> {
    pub dataset: &'a str,
    pub architecture: Architecture,
    pub algorithm: SmoothingLevel,
    pub metrics: &'a [MetricsRecord],
}

impl<'a> From<&'a ResultRow> for CurveSeries<'a> {
    fn from(r: &'a ResultRow) -> Self {
        Self {
            dataset: &r.dataset,
            architecture: r.architecture,
            algorithm: r.algorithm,
            metrics: &r.metrics,
        }
    }
}

/// Long-form `dataset,architecture,algorithm,epoch,val_accuracy` CSV.
/// Accuracies are written in shortest round-trip form, so reading them back
/// gives the recorded values exactly.
pub fn emit_curves(series: &[CurveSeries<'_>], path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.metrics.is_empty()) {
        return Err(Error::InvalidInput("curves need at least one epoch per run".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CURVES_HEADER).map_err(csv_err)?;
    for s in series {
        for m in s.metrics {
            w.write_record([
                s.dataset,
                s.architecture.name(),
                s.algorithm.name(),
                &m.epoch.to_string(),
                &m.val_accuracy.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Top-two principal components of a feature matrix.
#[derive(Clone, Debug)]
pub struct Projection {
    /// n × 2 coordinates of the centred rows.
    pub coords: Tensor2,
    /// 2 × d, orthonormal rows.
    pub components: Tensor2,
    pub mean: Vec<f64>,
    /// Sample variance along each component.
    pub variances: [f64; 2],
}

impl Projection {
    /// `mean + coords · components`, the rank-2 approximation of the input.
    pub fn reconstruct(&self) -> Result<Tensor2> {
        let mut x = matmul(&self.coords, &self.components)?;
        x.add_row_broadcast(&self.mean);
        Ok(x)
    }
}

/// Projects rows onto their top two principal components.
///
/// The components come from power iteration on the sample covariance,
/// started from the all-ones vector and stopped after 1000 iterations or
/// once the eigen-residual falls below 1e-10 (relative to the covariance
/// norm). The second component is found after deflating the first. Each
/// component's sign makes its largest-magnitude loading positive.
pub fn pca_project(features: &Tensor2) -> Result<Projection> {
    let (n, d) = features.shape();
    if n < 3 || d < 2 {
        return Err(Error::InvalidInput(format!(
            "projection needs at least 3 rows and 2 columns, got {n}x{d}"
        )));
    }
    if !features.is_finite() {
        return Err(Error::InvalidInput("features contain non-finite values".into()));
    }
    let mean: Vec<f64> = features.col_sums().into_iter().map(|s| s / n as f64).collect();
    let mut centred = features.clone();
    for r in 0..n {
        for (x, m) in centred.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    if centred.data().iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate("all feature rows are identical".into()));
    }
    let mut cov = matmul_tn(&centred, &centred)?;
    cov.scale(1.0 / (n - 1) as f64);
    let scale = cov.frobenius_norm();

    let (v1, l1) = leading_eigenvector(&cov, &[], scale);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated.set(i, j, deflated.get(i, j) - l1 * v1[i] * v1[j]);
        }
    }
    let (v2, l2) = leading_eigenvector(&deflated, &v1, scale);

    let components = Tensor2::from_rows(&[v1, v2])?;
    let coords = crate::numerics::matmul_nt(&centred, &components)?;
    Ok(Projection {
        coords,
        components,
        mean,
        variances: [l1, l2.max(0.0)],
    })
}

/// Power iteration restricted to the complement of `against` (unit vector,
/// or empty). Returns a unit eigenvector and its Rayleigh quotient.
fn leading_eigenvector(c: &Tensor2, against: &[f64], scale: f64) -> (Vec<f64>, f64) {
    let d = c.rows();
    let project_out = |v: &mut Vec<f64>| {
        if !against.is_empty() {
            let p = dot(v, against);
            for (x, a) in v.iter_mut().zip(against) {
                *x -= p * a;
            }
        }
    };
    let apply = |v: &[f64]| -> Vec<f64> { (0..d).map(|i| dot(c.row(i), v)).collect() };
    let tiny = scale * 1e-12;

    // Ones first; basis vectors only if ones lies (nearly) in `against`.
    let starts = std::iter::once(vec![1.0; d]).chain((0..d).map(|i| {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        e
    }));
    let mut v = Vec::new();
    for mut s in starts {
        project_out(&mut s);
        let norm = dot(&s, &s).sqrt();
        if norm > 1e-8 {
            v = s.into_iter().map(|x| x / norm).collect();
            break;
        }
    }

    let mut mu = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let mut w = apply(&v);
        project_out(&mut w);
        mu = dot(&v, &w);
        let norm = dot(&w, &w).sqrt();
        if norm <= tiny {
            // v spans the null space of the remaining operator.
            mu = 0.0;
            break;
        }
        let residual = w.iter().zip(&v).map(|(a, b)| (a - mu * b).powi(2)).sum::<f64>().sqrt();
        v = w.into_iter().map(|x| x / norm).collect();
        if residual <= POWER_TOLERANCE * scale {
            mu = dot(&v, &apply(&v));
            break;
        }
    }
    fix_sign(&mut v);
    (v, mu)
}

fn fix_sign(v: &mut [f64]) {
    let mut pivot = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Penultimate features for every example, in dataset order.
pub fn dataset_features(model: &Model, data: &Dataset) -> Result<Tensor2> {
    let mut rows = Vec::with_capacity(data.len());
    for chunk in data.examples.chunks(FEATURE_CHUNK) {
        let batch: Vec<&[usize]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
        let f = extract_penultimate(model, &batch)?;
        for r in 0..f.rows() {
            rows.push(f.row(r).to_vec());
        }
    }
    Tensor2::from_rows(&rows)
}

/// Encodes `raw` for a checkpoint's vocabulary and label set.
pub fn encode_for(checkpoint: &Checkpoint, raw: &Dataset<LabeledText>) -> Result<Dataset> {
    raw.relabel(&checkpoint.label_names)?
        .encode(&checkpoint.vocab, checkpoint.max_len)
}

/// Projects a checkpoint's penultimate features of `raw` to 2-D and writes
/// `x,y,label` rows, one per example in input order.
pub fn project_to_csv<W: Write>(checkpoint: &Checkpoint, raw: &Dataset<LabeledText>, out: W) -> Result<Projection> {
    let data = encode_for(checkpoint, raw)?;
    let features = dataset_features(&checkpoint.model, &data)?;
    let projection = pca_project(&features)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROJECTION_HEADER).map_err(csv_err)?;
    for (i, ex) in data.examples.iter().enumerate() {
        let row = projection.coords.row(i);
        w.write_record([
            row[0].to_string(),
            row[1].to_string(),
            data.label_names[ex.label].clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(projection)
}
