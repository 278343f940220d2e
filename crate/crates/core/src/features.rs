//! Raw-feature vocabularies and encoding shared by the two-tower model and the decoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Catalog, ContextEvent, DatasetRow, ItemId};
use crate::error::{Error, Result};

/// Index 0 of every table is reserved: unknown user, query padding, and the
/// "no history" context slot.
pub const RESERVED: usize = 0;

/// Lower-cased alphanumeric words followed by adjacent-word bigrams.
pub fn query_tokens(query: &str) -> Vec<String> {
    let words: Vec<String> = query
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let bigrams = words.windows(2).map(|w| format!("{}_{}", w[0], w[1]));
    words.iter().cloned().chain(bigrams).collect()
}

/// Categorical vocabularies plus efficiency-feature standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub query_len: usize,
    pub context_len: usize,
    users: BTreeMap<String, usize>,
    tokens: BTreeMap<String, usize>,
    items: BTreeMap<ItemId, usize>,
    efficiency_mean: Vec<f64>,
    efficiency_std: Vec<f64>,
}

/// One encoded (user, query, context) triple.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedContext {
    pub user: usize,
    /// Exactly `query_len` token indices.
    pub query: Vec<usize>,
    /// Exactly `context_len` item indices, most recent last.
    pub context: Vec<usize>,
}

impl FeatureVocab {
    /// Builds vocabularies from training rows and the full catalog.
    pub fn build(rows: &[DatasetRow], catalog: &Catalog, query_len: usize, context_len: usize) -> Result<Self> {
        if query_len == 0 || context_len == 0 {
            return Err(Error::Config("query_len and context_len must be >= 1".into()));
        }
        let mut users = BTreeMap::new();
        let mut tokens = BTreeMap::new();
        for r in rows {
            let next = users.len() + 1;
            users.entry(r.user_id.clone()).or_insert(next);
            for t in query_tokens(&r.query) {
                let next = tokens.len() + 1;
                tokens.entry(t).or_insert(next);
            }
        }
        let items = catalog
            .items()
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id, i + 1))
            .collect();
        let dim = catalog.efficiency_dim();
        let n = catalog.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for it in catalog.items() {
            for (m, v) in mean.iter_mut().zip(&it.efficiency) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for it in catalog.items() {
            for ((s, v), m) in var.iter_mut().zip(&it.efficiency).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self {
            query_len,
            context_len,
            users,
            tokens,
            items,
            efficiency_mean: mean,
            efficiency_std: std,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len() + 1
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn num_items(&self) -> usize {
        self.items.len() + 1
    }

    pub fn item_index(&self, id: ItemId) -> Result<usize> {
        self.items
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("item {id} has no feature id")))
    }

    pub fn standardize_efficiency(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.efficiency_mean.iter().zip(&self.efficiency_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Unknown users, tokens and context items map to the reserved slot.
    pub fn encode(&self, user_id: &str, query: &str, context: &[ContextEvent]) -> EncodedContext {
        let user = self.users.get(user_id).copied().unwrap_or(RESERVED);
        let mut q: Vec<usize> = query_tokens(query)
            .iter()
            .take(self.query_len)
            .map(|t| self.tokens.get(t).copied().unwrap_or(RESERVED))
            .collect();
        q.resize(self.query_len, RESERVED);
        let recent = &context[context.len().saturating_sub(self.context_len)..];
        let mut c = vec![RESERVED; self.context_len - recent.len()];
        c.extend(recent.iter().map(|e| self.items.get(&e.item_id).copied().unwrap_or(RESERVED)));
        EncodedContext { user, query: q, context: c }
    }

    pub fn encode_row(&self, row: &DatasetRow) -> EncodedContext {
        self.encode(&row.user_id, &row.query, &row.context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Item;

    fn catalog() -> Catalog {
        Catalog::new(
            (1..=3)
                .map(|i| Item {
                    item_id: ItemId(i),
                    category_path: vec![7],
                    semantic: vec![0.0],
                    efficiency: vec![i as f64, 5.0],
                    score: 0.1,
                })
                .collect(),
        )
        .unwrap()
    }

    fn row(user: &str, query: &str) -> DatasetRow {
        DatasetRow {
            user_id: user.into(),
            query: query.into(),
            context: vec![],
            target_item: ItemId(1),
            relevance: 1,
            click: 1,
            timestamp: 0,
        }
    }

    #[test]
    fn tokens_include_bigrams() {
        assert_eq!(query_tokens("Red  long-Dress"), vec!["red", "long", "dress", "red_long", "long_dress"]);
    }

    #[test]
    fn encode_pads_and_truncates() {
        let vocab = FeatureVocab::build(&[row("u1", "red dress")], &catalog(), 4, 2).unwrap();
        let enc = vocab.encode("u1", "red dress", &[]);
        assert_eq!(enc.query.len(), 4);
        assert_eq!(enc.query[3], RESERVED);
        assert_eq!(enc.context, vec![RESERVED, RESERVED]);
        let ctx: Vec<ContextEvent> = (1..=3)
            .map(|i| ContextEvent { item_id: ItemId(i), behavior: "click".into() })
            .collect();
        let enc = vocab.encode("stranger", "blue", &ctx);
        assert_eq!(enc.user, RESERVED);
        assert_eq!(enc.query[0], RESERVED);
        assert_eq!(enc.context, vec![2, 3]);
    }

    #[test]
    fn efficiency_standardized() {
        let vocab = FeatureVocab::build(&[], &catalog(), 1, 1).unwrap();
        let z = vocab.standardize_efficiency(&[2.0, 5.0]);
        assert!(z[0].abs() < 1e-12);
        // constant column keeps unit scale
        assert_eq!(z[1], 0.0);
    }
}
