//! Binary checkpoints: a JSON metadata blob (architecture + temporal-model
//! config) followed by a named parameter table, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Parameter;

const MAGIC: &[u8; 4] = b"SKCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("metadata is not valid JSON: {0}")]
    BadMeta(serde_json::Error),
    #[error("checkpoint has no entry for parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: checkpoint shape {stored:?} != model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("truncated checkpoint")]
    Truncated,
}

type Result<T> = std::result::Result<T, CheckpointError>;

pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn entry(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.params.iter().find(|(n, _, _)| n == name)
    }

    /// Copies stored values into the given parameters by name.
    pub fn restore(&self, params: &[Parameter]) -> Result<()> {
        for p in params {
            let (_, shape, values) = self
                .entry(&p.name())
                .ok_or_else(|| CheckpointError::MissingParam(p.name()))?;
            if *shape != p.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name(),
                    stored: shape.clone(),
                    expected: p.shape(),
                });
            }
            p.set_values(values.clone());
        }
        Ok(())
    }
}

pub fn save(
    path: impl AsRef<Path>,
    meta: &serde_json::Value,
    params: &[Parameter],
) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta).expect("meta serializes");
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        let name = p.name();
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = p.shape();
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for d in &shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let values = p.values();
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in &values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = read_u64(&mut pos)? as usize;
    let meta: serde_json::Value =
        serde_json::from_slice(take(&mut pos, meta_len)?).map_err(CheckpointError::BadMeta)?;
    let count = read_u64(&mut pos)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut pos)? as usize;
        let name = String::from_utf8_lossy(take(&mut pos, name_len)?).into_owned();
        let ndim = read_u64(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut pos)? as usize);
        }
        let len = read_u64(&mut pos)? as usize;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        params.push((name, shape, values));
    }
    Ok(Checkpoint { meta, params })
}
