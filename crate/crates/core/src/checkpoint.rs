//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic         8 bytes   "SMLBCKPT"
//! version       u32       1
//! header_len    u32
//! header        JSON      { model, max_len, label_names, vocab, algorithm, seed }
//! tensor_count  u32
//! tensor_count × {
//!     name_len  u16
//!     name      UTF-8
//!     rows      u32
//!     cols      u32
//!     data      rows·cols × f64, row-major
//! }
//! ```
//!
//! Tensor names and order follow [`crate::models::Params::named_tensors`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::numerics::{Rng, Tensor2};
use crate::textpipe::Vocabulary;

pub const MAGIC: &[u8; 8] = b"SMLBCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    max_len: usize,
    label_names: Vec<String>,
    vocab: Vec<String>,
    algorithm: String,
    seed: u64,
}

/// A trained model with everything needed to encode new text for it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub label_names: Vec<String>,
    pub max_len: usize,
    pub algorithm: String,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.config().clone(),
            max_len: self.max_len,
            label_names: self.label_names.clone(),
            vocab: self.vocab.tokens().to_vec(),
            algorithm: self.algorithm.clone(),
            seed: self.seed,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tensors = self.model.params().named_tensors();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&u32_len(tensors.len())?.to_le_bytes());
        for (name, t) in tensors {
            let name_len =
                u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name {name:?} too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(t.rows())?.to_le_bytes());
            out.extend_from_slice(&u32_len(t.cols())?.to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let mut params = Model::new(header.model.clone(), &mut Rng::new(0))?.params().clone();
        let expected: Vec<(String, (usize, usize))> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let count = read_u32(&mut r)? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, configuration needs {}",
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let shape = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
            if &name != want_name || shape != *want_shape {
                return Err(Error::Checkpoint(format!(
                    "found tensor {name} {shape:?}, expected {want_name} {want_shape:?}"
                )));
            }
            let mut data = Vec::with_capacity(shape.0 * shape.1);
            for _ in 0..shape.0 * shape.1 {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            loaded.push(Tensor2::from_vec(shape.0, shape.1, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        Ok(Self {
            model: Model::from_params(header.model, params)?,
            vocab: Vocabulary::from_tokens(header.vocab)?,
            label_names: header.label_names,
            max_len: header.max_len,
            algorithm: header.algorithm,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
