//! JSON checkpoint container: a versioned header, model metadata, and the
//! named tensors of a [`ParamStore`]. Floats are written in shortest
//! round-trip form and parsed exactly, so save → load is lossless.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Tensor2};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "higen-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: M,
    pub tensors: Vec<NamedTensor>,
}

impl<M> Checkpoint<M> {
    pub fn new(kind: &str, meta: M, store: &ParamStore) -> Self {
        let tensors = store
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
                data: t.iter().copied().collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    pub fn into_store(self) -> Result<(M, ParamStore)> {
        let mut names = Vec::with_capacity(self.tensors.len());
        let mut values = Vec::with_capacity(self.tensors.len());
        for t in self.tensors {
            let value = Tensor2::from_shape_vec((t.rows, t.cols), t.data)
                .map_err(|e| Error::dim("checkpoint tensor", format!("{} x {}", t.rows, t.cols), e))?;
            names.push(t.name);
            values.push(value);
        }
        Ok((self.meta, ParamStore::from_parts(names, values)))
    }
}

pub fn save_checkpoint<M: Serialize>(path: &Path, kind: &str, meta: &M, store: &ParamStore) -> Result<()> {
    let ckpt = Checkpoint::new(kind, meta, store);
    let text = serde_json::to_string(&ckpt)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, ParamStore)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint<M> = serde_json::from_str(&text).map_err(|e| Error::Load {
        what: "checkpoint",
        offset: line_col_to_offset(&text, e.line(), e.column()),
        reason: e.to_string(),
    })?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Load {
            what: "checkpoint",
            offset: 0,
            reason: format!("unexpected format tag {:?}", ckpt.format),
        });
    }
    if ckpt.version > CHECKPOINT_VERSION {
        return Err(Error::Load {
            what: "checkpoint",
            offset: 0,
            reason: format!("version {} is newer than supported {}", ckpt.version, CHECKPOINT_VERSION),
        });
    }
    if ckpt.kind != kind {
        return Err(Error::Load {
            what: "checkpoint",
            offset: 0,
            reason: format!("expected a {kind} checkpoint, found {}", ckpt.kind),
        });
    }
    ckpt.into_store()
}

pub(crate) fn line_col_to_offset(text: &str, line: usize, column: usize) -> u64 {
    let mut offset = 0usize;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)) as u64;
        }
        offset += l.len();
    }
    offset as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::xavier_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("a", xavier_uniform(3, 7, &mut rng));
        store.add("b", Tensor2::from_elem((1, 2), std::f64::consts::PI / 3.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, "test", &"meta".to_string(), &store).unwrap();
        let (meta, loaded): (String, _) = load_checkpoint(&path, "test").unwrap();
        assert_eq!(meta, "meta");
        for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = t1.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn newer_version_is_refused() {
        let store = ParamStore::new();
        let mut ckpt = Checkpoint::new("test", (), &store);
        ckpt.version = CHECKPOINT_VERSION + 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        assert!(matches!(load_checkpoint::<()>(&path, "test"), Err(Error::Load { .. })));
    }

    #[test]
    fn truncated_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, "{\"format\": \"higen-checkpoint\", \"vers").unwrap();
        match load_checkpoint::<()>(&path, "test") {
            Err(Error::Load { offset, .. }) => assert!(offset > 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
