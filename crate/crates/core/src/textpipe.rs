//! Tokenizer, vocabulary, dataset ingestion (CSV / TSV / JSONL), seeded
//! splits and mini-batch iteration.
//!
//! Typical flow: [`load_dataset`] → [`split_dataset`] → [`build_vocab`] on the
//! training texts → [`Dataset::encode`] both splits → [`iter_batches`].

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 64;

/// Lowercases, splits on whitespace and emits every ASCII punctuation
/// character as a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list (ids 0 and 1 must
    /// be the reserved PAD / UNK entries).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::InvalidInput(
                "vocabulary must start with the <pad> and <unk> entries".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keeps tokens seen at least `min_freq` times, ordered by descending
/// frequency then ascending token, capped so the total size with PAD and
/// UNK is at most `max_size`.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    if max_size < 2 {
        return Err(Error::Config(format!("max vocabulary size {max_size} < 2")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for tok in doc {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - 2);

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens)
}

/// Maps tokens to ids (unknown → UNK), truncating to and right-padding with
/// PAD up to `max_len`.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens.iter().take(max_len).map(|t| vocab.id(t.as_ref())).collect();
    ids.resize(max_len, PAD);
    ids
}

/// A tokenized text with its class index, before encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// Encoded example: fixed-length ids, class index, and the untruncated token count.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
    pub raw_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T = Example> {
    pub examples: Vec<T>,
    pub k: usize,
    pub label_names: Vec<String>,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

impl Dataset<LabeledText> {
    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> Result<Dataset<Example>> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(Dataset {
            examples: self
                .examples
                .iter()
                .map(|ex| Example {
                    ids: encode(&ex.tokens, vocab, max_len),
                    label: ex.label,
                    raw_len: ex.tokens.len(),
                })
                .collect(),
            k: self.k,
            label_names: self.label_names.clone(),
        })
    }

    /// Same texts re-labelled against an existing label list, e.g. the one
    /// stored with a trained model.
    pub fn relabel(&self, label_names: &[String]) -> Result<Self> {
        let mut examples = self.examples.clone();
        for ex in &mut examples {
            let name = &self.label_names[ex.label];
            ex.label = label_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::InvalidInput(format!("label {name:?} unknown to the model")))?;
        }
        Ok(Self {
            examples,
            k: label_names.len(),
            label_names: label_names.to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Csv,
    Tsv,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "tsv" => Ok(Format::Tsv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl Format {
    /// Guesses from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::Config(format!("cannot infer format of {}", path.display())))?
            .parse()
    }
}

/// Loads a labelled text file. Label names are sorted lexicographically and
/// numbered from 0; row order is preserved. Rows are numbered from 1 for the
/// first data row (the header is not counted).
pub fn load_dataset(path: &Path, format: Format, text_field: &str, label_field: &str) -> Result<Dataset<LabeledText>> {
    let rows = match format {
        Format::Csv => read_delimited(path, b',', text_field, label_field)?,
        Format::Tsv => read_delimited(path, b'\t', text_field, label_field)?,
        Format::Jsonl => read_jsonl(path, text_field, label_field)?,
    };
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            msg: "no data rows".into(),
        });
    }
    let label_names: Vec<String> = rows
        .iter()
        .map(|(_, l)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let examples = rows
        .into_iter()
        .map(|(text, label)| LabeledText {
            tokens: tokenize(&text),
            label: label_names.binary_search(&label).expect("label collected above"),
        })
        .collect();
    Ok(Dataset {
        examples,
        k: label_names.len(),
        label_names,
    })
}

fn read_delimited(path: &Path, delimiter: u8, text_field: &str, label_field: &str) -> Result<Vec<(String, String)>> {
    let parse_err = |row: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(File::open(path)?);
    let headers = reader.headers().map_err(|e| parse_err(0, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(0, format!("header has no {name:?} column")))
    };
    let (text_col, label_col) = (column(text_field)?, column(label_field)?);

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        let get = |col: usize, name: &str| {
            record
                .get(col)
                .map(str::to_string)
                .ok_or_else(|| parse_err(row, format!("missing field {name:?}")))
        };
        let text = get(text_col, text_field)?;
        let label = get(label_col, label_field)?.trim().to_string();
        if label.is_empty() {
            return Err(parse_err(row, format!("empty field {label_field:?}")));
        }
        rows.push((text, label));
    }
    Ok(rows)
}

fn read_jsonl(path: &Path, text_field: &str, label_field: &str) -> Result<Vec<(String, String)>> {
    let parse_err = |row: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let row = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(row, e.to_string()))?;
        let field = |name: &str| -> Result<String> {
            match obj.get(name) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(v @ (serde_json::Value::Number(_) | serde_json::Value::Bool(_))) => Ok(v.to_string()),
                Some(_) => Err(parse_err(row, format!("field {name:?} is not a string or number"))),
                None => Err(parse_err(row, format!("missing field {name:?}"))),
            }
        };
        let text = field(text_field)?;
        let label = field(label_field)?.trim().to_string();
        rows.push((text, label));
    }
    Ok(rows)
}

/// Seeded shuffle, then the last `round(n · val_fraction)` examples of the
/// permutation become the validation split.
pub fn split_dataset<T: Clone>(d: &Dataset<T>, val_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} not in (0, 1)"
        )));
    }
    let n = d.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} of {n} examples leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let pick = |idx: &[usize]| Dataset {
        examples: idx.iter().map(|&i| d.examples[i].clone()).collect(),
        k: d.k,
        label_names: d.label_names.clone(),
    };
    Ok((pick(&order[..n - n_val]), pick(&order[n - n_val..])))
}

/// Batch index lists for one epoch. With `shuffle`, the order is a
/// permutation drawn from `(seed, epoch)`; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        Rng::derive(seed, epoch).shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over the batches of one epoch, each a vector of borrowed examples.
pub fn iter_batches<'a, T>(
    d: &'a Dataset<T>,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Vec<&'a T>> + 'a> {
    let batches = batch_indices(d.len(), batch_size, shuffle, seed, epoch)?;
    Ok(batches
        .into_iter()
        .map(move |idx| idx.into_iter().map(|i| &d.examples[i]).collect()))
}
