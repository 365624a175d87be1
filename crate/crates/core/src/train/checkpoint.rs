//! Checkpoint file layout (little-endian):
//!
//! ```text
//! b"ECGM" | version u32 | json_len u32 | json header
//! tensor table    | optimizer table | crc32 u32
//! ```
//!
//! A table is a u32 count followed by entries of: name length u16, UTF-8
//! name, rank u8, rank x u32 dims, f32 payload. The optimizer table holds
//! `m.<param>` and `v.<param>` moments and is empty when no optimizer state
//! was saved. The CRC covers every preceding byte.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{TrainConfig, TrainHistory};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{AdamConfig, AdamState, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ECGM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Everything needed to evaluate a model or continue its training.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub adam: Option<AdamState<T>>,
    pub train_config: Option<TrainConfig>,
    pub history: TrainHistory,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    history: TrainHistory,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    config: AdamConfig,
    step_count: u64,
}

fn put_table<'a, T: Scalar>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (String, &'a [usize], &'a [T])>) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, checkpoint: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let model = &checkpoint.model;
    let header = Header {
        model: model.config().clone(),
        train: checkpoint.train_config.clone(),
        history: checkpoint.history.clone(),
        adam: checkpoint.adam.as_ref().map(|a| AdamHeader {
            config: a.config,
            step_count: a.step_count,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let buffers = model.buffers();
    let tensors: Vec<(String, &[usize], &[T])> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape(), p.value.data()))
        .chain(buffers.iter().map(|(n, t)| (n.clone(), t.shape(), t.data())))
        .collect();
    put_table(&mut out, tensors.into_iter());

    let mut moments: Vec<(String, &[usize], &[T])> = Vec::new();
    let flat: Vec<[usize; 1]> = model.params().iter().map(|p| [p.value.len()]).collect();
    if let Some(a) = &checkpoint.adam {
        for (prefix, table) in [("m", &a.first_moment), ("v", &a.second_moment)] {
            for ((p, m), shape) in model.params().iter().zip(table).zip(&flat) {
                moments.push((format!("{prefix}.{}", p.name), shape, m));
            }
        }
    }
    put_table(&mut out, moments.into_iter());

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn table<T: Scalar>(&mut self) -> Result<Vec<(String, Tensor<T>)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = n.and_then(|n| n.checked_mul(4)).ok_or(CheckpointError::Truncated)?;
            let data = self
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("tensor {name:?}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated);
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let json_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len)?)?;
    let tensors = r.table::<T>()?;
    let moments = r.table::<T>()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} unread bytes", body.len() - r.pos)));
    }

    let mut model = Model::<T>::build(header.model, 0)?;
    let expected = model.params().len() + model.buffers().len();
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name:?}")));
        }
        model.load_tensor(&name, t)?;
    }
    if seen.len() != expected {
        return Err(CheckpointError::Malformed(format!(
            "{} tensors stored, model has {expected}",
            seen.len()
        )));
    }

    let adam = match header.adam {
        None if moments.is_empty() => None,
        None => return Err(CheckpointError::Malformed("optimizer moments without optimizer header".into())),
        Some(h) => {
            let n = model.params().len();
            if moments.len() != 2 * n {
                return Err(CheckpointError::Malformed(format!(
                    "{} optimizer tensors, expected {}",
                    moments.len(),
                    2 * n
                )));
            }
            let mut first = Vec::with_capacity(n);
            let mut second = Vec::with_capacity(n);
            for (i, (name, t)) in moments.into_iter().enumerate() {
                let (prefix, slot) = if i < n { ("m", &mut first) } else { ("v", &mut second) };
                let p = &model.params()[i % n];
                if name != format!("{prefix}.{}", p.name) || t.len() != p.value.len() {
                    return Err(CheckpointError::Malformed(format!("unexpected optimizer tensor {name:?}")));
                }
                slot.push(t.into_data());
            }
            Some(AdamState {
                config: h.config,
                first_moment: first,
                second_moment: second,
                step_count: h.step_count,
            })
        }
    };
    Ok(Checkpoint {
        model,
        adam,
        train_config: header.train,
        history: header.history,
    })
}
