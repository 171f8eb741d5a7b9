//! Binary checkpoint: magic line, length-prefixed JSON header, then raw
//! little-endian f64 payloads in manifest order.
//!
//! ```text
//! "PERS1\n" | u64 LE header length | header JSON | f64 LE ...
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Vocabulary;
use crate::encoder::ModelError;
use crate::model::PersModel;
use crate::tensorkit::{Adam, ParamSet, Tensor};
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 6] = b"PERS1\n";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint or unsupported version (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("tensor {name}: {detail}")]
    Shape { name: String, detail: String },
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PersModel,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: PersModel,
    vocab: Vocabulary,
    config: TrainConfig,
    epoch: usize,
    adam_t: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let s = &self.state;
        s.params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .chain(s.adam.m.iter().map(|(n, t)| (format!("{MOMENT_M}{n}"), t)))
            .chain(s.adam.v.iter().map(|(n, t)| (format!("{MOMENT_V}{n}"), t)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let tensors = self.named_tensors();
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    dims: t.dims().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            config: self.config.clone(),
            epoch: self.state.epoch,
            adam_t: self.state.adam.t,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] = rest
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CheckpointError::Truncated("header length".into()))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = rest
            .get(8..8usize.saturating_add(hlen))
            .ok_or_else(|| CheckpointError::Truncated("header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.version));
        }
        let payload = &rest[8 + hlen..];

        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        let mut expected_end = 0u64;
        for e in &header.tensors {
            let n: usize = e.dims.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| CheckpointError::Truncated(format!("tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.dims.clone(), data).map_err(|err| CheckpointError::Shape {
                name: e.name.clone(),
                detail: err.to_string(),
            })?;
            if let Some(n) = e.name.strip_prefix(MOMENT_M) {
                m.insert(n, t);
            } else if let Some(n) = e.name.strip_prefix(MOMENT_V) {
                v.insert(n, t);
            } else {
                params.insert(e.name.as_str(), t);
            }
            expected_end = expected_end.max(end as u64);
        }
        if payload.len() as u64 != expected_end {
            return Err(CheckpointError::Truncated(format!(
                "payload is {} bytes, manifest needs {expected_end}",
                payload.len()
            )));
        }
        header.model.check_params(&params)?;
        for (label, moments) in [("m", &m), ("v", &v)] {
            for (name, t) in params.iter() {
                match moments.get(name) {
                    Some(mt) if mt.dims() == t.dims() => {}
                    _ => {
                        return Err(CheckpointError::Shape {
                            name: format!("adam.{label}/{name}"),
                            detail: "missing or mismatched optimizer moment".into(),
                        })
                    }
                }
            }
        }
        if header.vocab.size() != header.model.hp.catalog() {
            return Err(CheckpointError::Shape {
                name: "vocabulary".into(),
                detail: format!(
                    "{} entries, model expects {}",
                    header.vocab.size(),
                    header.model.hp.catalog()
                ),
            });
        }
        Ok(Checkpoint {
            state: TrainState {
                params,
                adam: Adam {
                    config: header.config.adam(),
                    t: header.adam_t,
                    m,
                    v,
                },
                epoch: header.epoch,
            },
            model: header.model,
            vocab: header.vocab,
            config: header.config,
        })
    }
}

/// Write via a sibling temp file and rename, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = cp.to_bytes()?;
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codefeat::CodeSourceKind;
    use crate::encoder::HyperParams;
    use crate::perscell::CellConfig;

    fn sample() -> Checkpoint {
        let hp = HyperParams {
            d_p: 4,
            d_pos: 4,
            d_c: 4,
            d_ct: 2,
            d_cm: 2,
            d_cs: 2,
            d_k: 4,
            max_len: 8,
            n_exercises: 3,
            layers: 1,
        };
        let model = PersModel::new(
            hp,
            CellConfig::default(),
            CodeSourceKind::HashedTokens { buckets: 8, dim: 4 },
        )
        .unwrap();
        let config = TrainConfig::default();
        let mut state = TrainState::fresh(&model, &config);
        state.epoch = 3;
        state.adam.t = 17;
        for (_, t) in state.adam.m.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.1f64.sqrt());
        }
        Checkpoint {
            model,
            vocab: Vocabulary::new(["a", "b", "c"]),
            config,
            state,
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let cp = sample();
        let bytes = cp.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncated() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut cp = sample();
        cp.state.params.insert("readout.b", Tensor::zeros(&[3]));
        let bytes = cp.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Model(_))));
    }
}
