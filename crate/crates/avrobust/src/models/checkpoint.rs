//! Checkpoint container.
//!
//! ```text
//! u64 LE      index length L
//! L bytes     JSON index {format, version, config, step, rng_state, adam, tensors}
//! ...         AVFB blocks (64-bit floats), located by absolute offsets
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::Model;
use crate::audiofeat::container::{decode_tensor, encode_tensor, write_atomic};
use crate::audiofeat::DType;
use crate::diffengine::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};

const FORMAT: &str = "avrobust-checkpoint";
const VERSION: u32 = 1;

/// Position of a ChaCha8 stream; enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::validation(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::validation("rng seed must be 32 bytes"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::validation(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// A model plus the optimizer and RNG state needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub step: u64,
    pub rng_state: Option<RngState>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            adam: None,
            step: 0,
            rng_state: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamIndex {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format: String,
    version: u32,
    config: ModelConfig,
    step: u64,
    rng_state: Option<RngState>,
    adam: Option<AdamIndex>,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, &Tensor)> {
    let params = ck.model.params();
    let mut out: Vec<(String, &Tensor)> = params.names().iter().cloned().zip(params.tensors()).collect();
    if let Some(adam) = &ck.adam {
        for (n, t) in params.names().iter().zip(adam.first_moments()) {
            out.push((format!("adam.m/{n}"), t));
        }
        for (n, t) in params.names().iter().zip(adam.second_moments()) {
            out.push((format!("adam.v/{n}"), t));
        }
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = named_tensors(ck);
    let blocks: Vec<Vec<u8>> = tensors
        .iter()
        .map(|(_, t)| encode_tensor(t, DType::F64))
        .collect::<Result<_>>()?;
    // Offsets depend on the index length, which depends on the offsets'
    // digits; iterate until the length is stable.
    let mut index_len = 0usize;
    loop {
        let mut offset = 8 + index_len as u64;
        let entries = tensors
            .iter()
            .zip(&blocks)
            .map(|((name, t), b)| {
                let e = TensorEntry {
                    name: name.clone(),
                    offset,
                    shape: t.shape().to_vec(),
                };
                offset += b.len() as u64;
                e
            })
            .collect();
        let index = Index {
            format: FORMAT.into(),
            version: VERSION,
            config: ck.model.config(),
            step: ck.step,
            rng_state: ck.rng_state.clone(),
            adam: ck.adam.as_ref().map(|a| AdamIndex {
                config: a.config,
                step: a.step_count(),
            }),
            tensors: entries,
        };
        let json = serde_json::to_vec(&index)?;
        if json.len() == index_len {
            let mut out = Vec::with_capacity(8 + json.len() + blocks.iter().map(Vec::len).sum::<usize>());
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
            for b in &blocks {
                out.extend_from_slice(b);
            }
            return Ok(out);
        }
        index_len = json.len();
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

fn read_index(bytes: &[u8]) -> Result<Index> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
    }
    let len = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
    let end = 8u64
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated checkpoint index of {len} bytes")))?;
    let index: Index = serde_json::from_slice(&bytes[8..end as usize])
        .map_err(|e| Error::format(8, format!("checkpoint index: {e}")))?;
    if index.format != FORMAT {
        return Err(Error::format(8, format!("not a checkpoint: format {:?}", index.format)));
    }
    if index.version != VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {}", index.version)));
    }
    Ok(index)
}

fn block(bytes: &[u8], entry: &TensorEntry) -> Result<Tensor> {
    let start = usize::try_from(entry.offset)
        .ok()
        .filter(|&s| s < bytes.len())
        .ok_or_else(|| Error::format(entry.offset, format!("tensor {} lies past the end of the file", entry.name)))?;
    let (t, _, _) = decode_tensor(&bytes[start..], entry.offset)?;
    if t.shape() != entry.shape.as_slice() {
        return Err(Error::format(
            entry.offset,
            format!("tensor {}: block shape {:?} disagrees with index {:?}", entry.name, t.shape(), entry.shape),
        ));
    }
    Ok(t)
}

/// Parses a checkpoint, building a model of `expected` architecture when
/// given (otherwise the stored one). Nothing is returned unless every
/// tensor loads and matches its expected shape.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let index = read_index(bytes)?;
    let config = expected.cloned().unwrap_or_else(|| index.config.clone());
    let mut model = Model::new(&config, 0)?;
    let find = |name: &str| -> Result<&TensorEntry> {
        index
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(8, format!("checkpoint has no tensor {name}")))
    };
    let names = model.params().names().to_vec();
    let mut loaded = Vec::with_capacity(names.len());
    for name in &names {
        let entry = find(name)?;
        let want = model.params().by_name(name).expect("own parameter").shape().to_vec();
        if entry.shape != want {
            return Err(Error::dim(format!(
                "tensor {name}: checkpoint shape {:?}, model expects {want:?}",
                entry.shape
            )));
        }
        loaded.push(block(bytes, entry)?);
    }
    let adam = match &index.adam {
        Some(a) => {
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for name in &names {
                m.push(block(bytes, find(&format!("adam.m/{name}"))?)?);
                v.push(block(bytes, find(&format!("adam.v/{name}"))?)?);
            }
            Some(AdamState::from_parts(a.config, a.step, m, v)?)
        }
        None => None,
    };
    for (name, t) in names.iter().zip(loaded) {
        model.params_mut().set(name, t)?;
    }
    Ok(Checkpoint {
        model,
        adam,
        step: index.step,
        rng_state: index.rng_state,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, None)
}

/// Loads a checkpoint into a model built from `expected`; any tensor whose
/// stored shape differs is reported by name.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, Some(expected))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
