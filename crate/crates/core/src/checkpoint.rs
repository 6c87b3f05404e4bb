//! Binary checkpoint format.
//!
//! ```text
//! "DGT1"
//! u64 header length, JSON header (version, model config, districts, ...)
//! per tensor: u64 name length, UTF-8 name, u64 rank, rank × u64 dims,
//!             f32 data
//! ```
//!
//! All integers and reals are little-endian. Besides the model parameters a
//! checkpoint may carry auxiliary tensors under the `state/` prefix, which
//! training uses for optimizer moments and the best weights seen so far.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, TranscriptionModel};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"DGT1";
pub const FORMAT_VERSION: u32 = 1;
pub const STATE_PREFIX: &str = "state/";

const MAX_RANK: u64 = 8;

/// Progress of an interrupted training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_wer: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
    pub use_district_tokens: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub districts: Vec<String>,
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub tensor_count: usize,
    #[serde(default)]
    pub training: Option<TrainingState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: TranscriptionModel<f32>,
    pub vocab: Vocabulary,
    /// Auxiliary tensors, keyed without the `state/` prefix.
    pub state: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(
        model: TranscriptionModel<f32>,
        vocab: Vocabulary,
        seed: u64,
        step: u64,
    ) -> Result<Self> {
        if model.config().vocab_size != vocab.size() {
            return Err(Error::contract(format!(
                "model has {} embedding rows but the vocabulary has {} ids",
                model.config().vocab_size,
                vocab.size()
            )));
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                model: model.config().clone(),
                districts: vocab.districts().to_vec(),
                seed,
                step,
                tensor_count: model.params().len(),
                training: None,
            },
            model,
            vocab,
            state: BTreeMap::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.version = FORMAT_VERSION;
        header.model = self.model.config().clone();
        header.districts = self.vocab.districts().to_vec();
        header.tensor_count = self.model.params().len() + self.state.len();
        let json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let params = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), &p.tensor));
        let state = self
            .state
            .iter()
            .map(|(k, t)| (format!("{STATE_PREFIX}{k}"), t));
        for (name, tensor) in params.chain(state) {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len = r.u64("header length")? as usize;
        let raw = r.take(header_len, "header")?;
        let value: serde_json::Value =
            serde_json::from_slice(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let found = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Header("no version field".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::VersionMismatch {
                found: found.min(u64::from(u32::MAX)) as u32,
                expected: FORMAT_VERSION,
            });
        }
        let header: CheckpointHeader =
            serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;
        header
            .model
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let vocab = Vocabulary::with_districts(&header.districts)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if vocab.size() != header.model.vocab_size {
            return Err(CheckpointError::Header(format!(
                "{} districts give {} ids but the model has {} embedding rows",
                header.districts.len(),
                vocab.size(),
                header.model.vocab_size
            )));
        }

        let mut model = TranscriptionModel::<f32>::new(header.model.clone(), 0)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let index: BTreeMap<String, usize> = model
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let mut seen = HashSet::new();
        let mut state = BTreeMap::new();
        for _ in 0..header.tensor_count {
            let name_len = r.u64("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| CheckpointError::Header("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::DuplicateTensor(name));
            }
            let rank = r.u64(&format!("rank of {name}"))?;
            if rank == 0 || rank > MAX_RANK {
                return Err(CheckpointError::Header(format!(
                    "tensor {name} has rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(r.u64(&format!("shape of {name}"))? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    CheckpointError::Header(format!("tensor {name} has shape {shape:?}"))
                })?;
            let expected = if let Some(&i) = index.get(&name) {
                Some(model.params()[i].tensor.shape().to_vec())
            } else if name.starts_with(STATE_PREFIX) {
                None
            } else {
                return Err(CheckpointError::UnexpectedTensor(name));
            };
            if let Some(expected) = &expected {
                if *expected != shape {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        expected: expected.clone(),
                        found: shape,
                    });
                }
            }
            let data_bytes = count
                .checked_mul(4)
                .ok_or_else(|| CheckpointError::Truncated(format!("data of {name}")))?;
            let data: Vec<f32> = r
                .take(data_bytes, &format!("data of {name}"))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data).expect("element count matches shape");
            match index.get(&name) {
                Some(&i) => model.params_mut()[i].tensor = tensor,
                None => {
                    state.insert(name[STATE_PREFIX.len()..].to_string(), tensor);
                }
            }
        }
        if let Some(missing) = index.keys().find(|n| !seen.contains(*n)) {
            return Err(CheckpointError::MissingTensor(missing.clone()));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            header,
            model,
            vocab,
            state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
}
