//! Self-describing checkpoint files.
//!
//! Layout: the magic line `CSNCKPT1\n`, a little-endian `u64` header length,
//! a JSON header (run config, vocabulary, parameter names and shapes), then
//! every parameter as little-endian `f32` values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Vocabulary;
use crate::error::{CsnError, Result};
use crate::model::CsnModel;
use crate::seeding::{stream_rng, Stream};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"CSNCKPT1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vec<String>,
    params: Vec<ParamEntry>,
}

/// A trained model together with the configuration and vocabulary it was
/// built from.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: CsnModel,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.entries().to_vec(),
            params: self
                .model
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * self.model.store.total_size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.model.store.iter() {
            for &x in p.value.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds the model from the stored config and checks that every
    /// stored parameter matches it by name and shape.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CsnError::Checkpoint(m.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a checkpoint file"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header"));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("eight bytes")) as usize;
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let (json, mut payload) = rest.split_at(len);
        let header: Header = serde_json::from_slice(json).map_err(|e| CsnError::Checkpoint(format!("header: {e}")))?;
        header.config.validate()?;
        let vocab = Vocabulary::from_tokens(header.vocab.iter().cloned());
        if vocab.entries().len() != header.vocab.len() {
            return Err(bad("duplicate tokens in stored vocabulary"));
        }
        let model_config = header.config.model_config(vocab.size());
        let mut model = CsnModel::new(model_config, &mut stream_rng(header.config.seed, Stream::Init))?;
        let expected: Vec<ParamEntry> = model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        if expected.len() != header.params.len() {
            return Err(CsnError::Checkpoint(format!(
                "{} stored parameters, config implies {}",
                header.params.len(),
                expected.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for ((id, want), got) in ids.into_iter().zip(&expected).zip(&header.params) {
            if want != got {
                return Err(CsnError::Checkpoint(format!(
                    "parameter {} {:?} does not match config ({} {:?})",
                    got.name, got.shape, want.name, want.shape
                )));
            }
            let n: usize = got.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(CsnError::Checkpoint(format!("payload of {} truncated", got.name)));
            }
            let (chunk, tail) = payload.split_at(4 * n);
            payload = tail;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64)
                .collect();
            *model.store.value_mut(id) = Tensor::new(got.shape.clone(), data);
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            config: header.config,
            vocab,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CsnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CsnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let mut config = RunConfig::default();
        config.corpus.max_tokens = 4;
        config.model.embed_dim = 4;
        config.model.hidden = 3;
        config.selection.h = 2;
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]);
        let model = CsnModel::new(config.model_config(vocab.size()), &mut stream_rng(9, Stream::Init)).unwrap();
        Checkpoint { config, vocab, model }
    }

    #[test]
    fn round_trip_keeps_f32_values() {
        let ck = tiny();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.vocab, ck.vocab);
        for ((_, a), (_, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn shape_disagreement_is_rejected() {
        let ck = tiny();
        let mut other = ck.clone();
        other.config.model.hidden = 4;
        // stored shapes were produced with hidden = 3
        let bytes = other.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CsnError::Checkpoint(_))));
    }

    #[test]
    fn garbage_and_truncation_are_rejected() {
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let mut bytes = tiny().to_bytes();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CsnError::Checkpoint(_))));
    }
}
