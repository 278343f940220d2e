//! Per-position loss weights.
//!
//! `w_t = λ_h·h_t + λ_s·s_t + λ_e·e_t` where `h_t` decays exponentially with
//! depth, `s_t` flags a semantically irrelevant greedy prediction inside the
//! category layer and `e_t` is the efficient-score gap between the target node
//! and the greedily predicted node below it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

/// `e^{L−t} / Σ_{i=0}^{L} e^i`, evaluated as `e^{−t} / Σ e^{−i}` to stay finite.
pub fn hierarchical_weight(t: usize, max_pos: usize) -> Result<f64> {
    if t > max_pos {
        return Err(Error::Config(format!("position {t} is beyond the last position {max_pos}")));
    }
    let denom: f64 = (0..=max_pos).map(|i| (-(i as f64)).exp()).sum();
    Ok((-(t as f64)).exp() / denom)
}

/// Symmetric category similarity with self-similarity 1; unknown pairs are 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelevanceOracle {
    table: BTreeMap<(u32, u32), f64>,
}

#[derive(Serialize, Deserialize)]
struct SimilarityRecord {
    a: u32,
    b: u32,
    similarity: f64,
}

impl RelevanceOracle {
    pub const THRESHOLD: f64 = 0.5;

    pub fn new(pairs: impl IntoIterator<Item = (u32, u32, f64)>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (a, b, s) in pairs {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Data(format!("similarity of ({a}, {b}) must lie in [0, 1], got {s}")));
            }
            if a == b && s != 1.0 {
                return Err(Error::Data(format!("self-similarity of {a} must be 1, got {s}")));
            }
            let key = (a.min(b), a.max(b));
            if let Some(old) = table.insert(key, s) {
                if old != s {
                    return Err(Error::Data(format!("conflicting similarities for ({a}, {b}): {old} and {s}")));
                }
            }
        }
        Ok(Self { table })
    }

    pub fn similarity(&self, a: u32, b: u32) -> f64 {
        if a == b {
            return 1.0;
        }
        self.table.get(&(a.min(b), a.max(b))).copied().unwrap_or(0.0)
    }

    pub fn is_relevant(&self, a: u32, b: u32) -> bool {
        self.similarity(a, b) >= Self::THRESHOLD
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// JSONL records `{a, b, similarity}`.
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<SimilarityRecord> = read_jsonl(path)?;
        Self::new(records.into_iter().map(|r| (r.a, r.b, r.similarity)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<SimilarityRecord> = self
            .table
            .iter()
            .map(|(&(a, b), &similarity)| SimilarityRecord { a, b, similarity })
            .collect();
        write_jsonl(path, &records)
    }
}

/// Mixing coefficients plus the hierarchical decay for each position.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionWeights {
    pub hierarchical: Vec<f64>,
    pub lambda_h: f64,
    pub lambda_s: f64,
    pub lambda_e: f64,
}

impl PositionWeights {
    /// Exponential decay over `max_len` positions.
    pub fn decay(max_len: usize, lambda_h: f64, lambda_s: f64, lambda_e: f64) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("docIDs need at least one position".into()));
        }
        for (name, v) in [("lambda_h", lambda_h), ("lambda_s", lambda_s), ("lambda_e", lambda_e)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(Self {
            hierarchical: (0..max_len)
                .map(|t| hierarchical_weight(t, max_len - 1))
                .collect::<Result<_>>()?,
            lambda_h,
            lambda_s,
            lambda_e,
        })
    }

    /// Every position weighted `1/max_len`: the mean token cross-entropy.
    pub fn uniform(max_len: usize) -> Self {
        Self {
            hierarchical: vec![1.0 / max_len as f64; max_len],
            lambda_h: 1.0,
            lambda_s: 0.0,
            lambda_e: 0.0,
        }
    }

    /// Weight of position `t` for a docID whose first `semantic_len` tokens are
    /// categories. `target_score` and `predicted_score` are the efficient scores
    /// of the target node and the greedily predicted sibling; both are required
    /// below the semantic layer when `lambda_e > 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn weight(
        &self,
        t: usize,
        semantic_len: usize,
        target: u32,
        predicted: u32,
        target_score: Option<f64>,
        predicted_score: Option<f64>,
        oracle: &RelevanceOracle,
    ) -> Result<f64> {
        let h = *self
            .hierarchical
            .get(t)
            .ok_or_else(|| Error::Index(format!("position {t} is beyond the weight table")))?;
        let mut w = self.lambda_h * h;
        if t < semantic_len {
            if self.lambda_s > 0.0 && !oracle.is_relevant(target, predicted) {
                w += self.lambda_s;
            }
        } else if self.lambda_e > 0.0 {
            let (Some(a), Some(b)) = (target_score, predicted_score) else {
                return Err(Error::Index(format!("missing efficient score at position {t}")));
            };
            w += self.lambda_e * (a - b).abs();
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_position_has_full_weight() {
        assert_eq!(hierarchical_weight(0, 0).unwrap(), 1.0);
        assert!(hierarchical_weight(1, 0).is_err());
    }

    #[test]
    fn oracle_is_symmetric() {
        let o = RelevanceOracle::new([(1, 2, 0.7), (3, 1, 0.2)]).unwrap();
        assert_eq!(o.similarity(2, 1), 0.7);
        assert_eq!(o.similarity(1, 3), 0.2);
        assert_eq!(o.similarity(4, 4), 1.0);
        assert_eq!(o.similarity(4, 5), 0.0);
        assert!(RelevanceOracle::new([(1, 1, 0.5)]).is_err());
        assert!(RelevanceOracle::new([(1, 2, 1.5)]).is_err());
        assert!(RelevanceOracle::new([(1, 2, 0.5), (2, 1, 0.6)]).is_err());
    }

    #[test]
    fn matching_prediction_adds_nothing() {
        let w = PositionWeights::decay(3, 0.8, 0.1, 0.1).unwrap();
        let o = RelevanceOracle::default();
        let base = 0.8 * w.hierarchical[0];
        assert_eq!(w.weight(0, 1, 7, 7, None, None, &o).unwrap(), base);
        let deep = w.weight(2, 1, 3, 4, Some(0.4), Some(0.4), &o).unwrap();
        assert_eq!(deep, 0.8 * w.hierarchical[2]);
        assert!(w.weight(2, 1, 3, 4, None, Some(0.4), &o).is_err());
    }
}
