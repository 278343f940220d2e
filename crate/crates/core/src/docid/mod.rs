//! Hierarchical document identifiers.
//!
//! A docID is the item's category path (the semantic layer) followed by a
//! k-means cluster token and then either deeper cluster tokens or an ordinal
//! within the final cluster. Tokens are qualified by position, so the same value
//! at two positions never collides. Every node below the semantic layer carries
//! the mean efficient score of the items underneath it.

mod build;
mod index_file;
pub mod kmeans;
mod trie;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use build::{build_docids, hierarchical_cluster, DocIdConfig, DocIdAssignment, NodeScores};
pub use index_file::{load_index, save_index, INDEX_VERSION};
pub use kmeans::{kmeans, KMeansResult};
pub use trie::{DocIndex, DocIdTrie, NodeId};

use crate::error::{Error, Result};

/// Token sequence identifying one item. Position `t` of `tokens` is the token
/// at docID position `t`; the first `semantic_len` tokens are category ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocId {
    pub tokens: Vec<u32>,
    pub semantic_len: usize,
}

impl DocId {
    pub fn new(tokens: Vec<u32>, semantic_len: usize) -> Result<Self> {
        if tokens.is_empty() || semantic_len >= tokens.len() {
            return Err(Error::Index(format!(
                "docID needs at least one token after {semantic_len} category tokens, got {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, semantic_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn semantic(&self) -> &[u32] {
        &self.tokens[..self.semantic_len]
    }

    /// Parses the dash-joined text form, e.g. `"2-202-3-7"`.
    pub fn parse(text: &str, semantic_len: usize) -> Result<Self> {
        let tokens = text
            .split('-')
            .map(|t| t.parse::<u32>().map_err(|_| Error::Data(format!("bad docID token {t:?} in {text:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens, semantic_len)
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let d = DocId::new(vec![2, 202, 3, 7], 2).unwrap();
        assert_eq!(d.to_string(), "2-202-3-7");
        assert_eq!(DocId::parse("2-202-3-7", 2).unwrap(), d);
        assert_eq!(d.semantic(), &[2, 202]);
        assert!(DocId::parse("2-x", 1).is_err());
        assert!(DocId::new(vec![2], 1).is_err());
    }
}
