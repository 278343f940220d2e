//! Binary index file.
//!
//! Layout (little endian): 8-byte magic, u32 version, u64 docID count, then per
//! docID `u64 item, u32 semantic_len, u32 len, len × u32 tokens`; u64 score
//! count, then per score `u32 len, len × u32 prefix, u64 f64-bits`; finally a
//! 32-byte SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::build::{DocIdAssignment, NodeScores};
use super::trie::DocIndex;
use super::DocId;
use crate::data::ItemId;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HIGENIDX";
pub const INDEX_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn save_index(path: &Path, index: &DocIndex) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.docids().len() as u64).to_le_bytes());
    for (item, d) in index.docids() {
        buf.extend_from_slice(&item.0.to_le_bytes());
        buf.extend_from_slice(&(d.semantic_len as u32).to_le_bytes());
        put_tokens(&mut buf, &d.tokens);
    }
    buf.extend_from_slice(&(index.node_scores().len() as u64).to_le_bytes());
    for (prefix, score) in index.node_scores() {
        put_tokens(&mut buf, prefix);
        buf.extend_from_slice(&score.to_bits().to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn put_tokens(buf: &mut Vec<u8>, tokens: &[u32]) {
    buf.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Load {
            what: "index".into(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len().saturating_sub(self.pos) < n {
            return Err(self.fail(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Length prefix that must fit in the remaining bytes.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()? as usize;
        if n.checked_mul(unit).is_none_or(|b| b > self.bytes.len() - self.pos) {
            self.pos = at;
            return Err(self.fail(format!("count {n} exceeds file size")));
        }
        Ok(n)
    }

    fn tokens(&mut self) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.fail("token count overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Loads an index, verifying the checksum and rebuilding the trie. Any failure
/// yields an error carrying the byte offset where parsing stopped.
pub fn load_index(path: &Path) -> Result<DocIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not an index file"));
    }
    let version = r.u32()?;
    if version > INDEX_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("index version {version} is newer than supported {INDEX_VERSION}")));
    }
    let n = r.len(16)?;
    let mut docids = BTreeMap::new();
    for _ in 0..n {
        let at = r.pos;
        let item = ItemId(r.u64()?);
        let s = r.u32()? as usize;
        let tokens = r.tokens()?;
        let d = DocId::new(tokens, s).map_err(|e| Error::Load {
            what: "index".into(),
            offset: at as u64,
            reason: e.to_string(),
        })?;
        if docids.insert(item, d).is_some() {
            r.pos = at;
            return Err(r.fail(format!("item {item} appears twice")));
        }
    }
    let m = r.len(12)?;
    let mut scores = NodeScores::new();
    for _ in 0..m {
        let prefix = r.tokens()?;
        scores.insert(prefix, f64::from_bits(r.u64()?));
    }
    let body_end = r.pos;
    let stored = r.take(DIGEST_LEN)?;
    if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
        r.pos = body_end;
        return Err(r.fail("checksum mismatch"));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after checksum"));
    }
    DocIndex::new(DocIdAssignment {
        docids,
        node_scores: scores,
    })
    .map_err(|e| Error::Load {
        what: "index".into(),
        offset: body_end as u64,
        reason: e.to_string(),
    })
}
