//! Recall expansion around decoded docIDs.
//!
//! Cluster expansion adds every item whose docID shares a leading prefix with a
//! decoded docID. I2I expansion treats decoded items as triggers into a Swing
//! co-click table. [`merge_recall`] combines the tiers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl, ItemId};
use crate::docid::DocIndex;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Direct,
    Cluster,
    I2i,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalled {
    pub item_id: ItemId,
    pub source: Source,
    pub score: f64,
}

/// Ordered, duplicate-free recall list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallSet {
    pub entries: Vec<Recalled>,
}

impl RecallSet {
    /// Number of recalled items.
    pub fn recall_num(&self) -> usize {
        self.entries.len()
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.entries.iter().map(|e| e.item_id).collect()
    }

    /// Decoded items in rank order, scored by their log-probability.
    pub fn direct(hits: &[(ItemId, f64)]) -> Self {
        let mut seen = BTreeSet::new();
        Self {
            entries: hits
                .iter()
                .filter(|(i, _)| seen.insert(*i))
                .map(|&(item_id, score)| Recalled {
                    item_id,
                    source: Source::Direct,
                    score,
                })
                .collect(),
        }
    }
}

/// Items sharing the first `prefix_len` tokens with any decoded docID.
///
/// Decoded items come first in the given order. The rest follow by their leaf
/// efficient score (descending), then item id. A docID shorter than
/// `prefix_len` only matches itself.
pub fn cluster_expand(decoded: &[Vec<u32>], index: &DocIndex, prefix_len: usize) -> Result<RecallSet> {
    if prefix_len == 0 {
        return Err(Error::Config("cluster expansion prefix must be >= 1".into()));
    }
    let trie = index.trie();
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    let mut expanded = BTreeSet::new();
    for tokens in decoded {
        let Some(item) = trie.lookup(tokens) else {
            return Err(Error::Index(format!("decoded docID {tokens:?} is not in the index")));
        };
        if seen.insert(item) {
            entries.push(Recalled {
                item_id: item,
                source: Source::Direct,
                score: index.leaf_score(item).unwrap_or(0.0),
            });
        }
        let node = trie.walk(&tokens[..prefix_len.min(tokens.len())]).expect("prefix of an indexed docID");
        expanded.extend(trie.items_under(node).iter().copied());
    }
    let mut extra: Vec<(f64, ItemId)> = expanded
        .into_iter()
        .filter(|i| !seen.contains(i))
        .map(|i| (index.leaf_score(i).unwrap_or(0.0), i))
        .collect();
    extra.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    entries.extend(extra.into_iter().map(|(score, item_id)| Recalled {
        item_id,
        source: Source::Cluster,
        score,
    }));
    Ok(RecallSet { entries })
}

/// Item → neighbors by descending Swing score, ties by ascending item id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct I2ITable {
    pub neighbors: BTreeMap<ItemId, Vec<(ItemId, f64)>>,
}

#[derive(Serialize, Deserialize)]
struct I2IRecord {
    item_id: ItemId,
    neighbors: Vec<(ItemId, f64)>,
}

impl I2ITable {
    pub fn score(&self, a: ItemId, b: ItemId) -> Option<f64> {
        self.neighbors.get(&a)?.iter().find(|(n, _)| *n == b).map(|(_, s)| *s)
    }

    /// JSONL `{item_id, neighbors: [[item_id, score], ...]}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<I2IRecord> = self
            .neighbors
            .iter()
            .map(|(i, n)| I2IRecord {
                item_id: *i,
                neighbors: n.clone(),
            })
            .collect();
        write_jsonl(path, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<I2IRecord> = read_jsonl(path)?;
        Ok(Self {
            neighbors: records.into_iter().map(|r| (r.item_id, r.neighbors)).collect(),
        })
    }
}

/// Swing similarity `s(i,j) = Σ_{u<v ∈ U_i∩U_j} 1 / (α + |I_u ∩ I_v|)`.
///
/// Duplicate (user, item) pairs count once. Pairs with fewer than two common
/// users are omitted. When `top_n` is given each list keeps its best `top_n`.
pub fn swing_scores<U: Ord + Clone>(interactions: &[(U, ItemId)], alpha: f64, top_n: Option<usize>) -> Result<I2ITable> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("swing alpha must be > 0, got {alpha}")));
    }
    let mut user_items: BTreeMap<U, BTreeSet<ItemId>> = BTreeMap::new();
    for (u, i) in interactions {
        user_items.entry(u.clone()).or_default().insert(*i);
    }
    let users: Vec<&BTreeSet<ItemId>> = user_items.values().collect();
    let mut item_users: BTreeMap<ItemId, Vec<usize>> = BTreeMap::new();
    for (ui, items) in users.iter().enumerate() {
        for i in *items {
            item_users.entry(*i).or_default().push(ui);
        }
    }
    // Pair overlaps are shared across every item pair the two users co-click.
    let mut overlap: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut scores: BTreeMap<(ItemId, ItemId), f64> = BTreeMap::new();
    for (&i, ui) in &item_users {
        for (a, &u) in ui.iter().enumerate() {
            for &v in &ui[a + 1..] {
                let common = *overlap
                    .entry((u, v))
                    .or_insert_with(|| users[u].intersection(users[v]).count());
                let w = 1.0 / (alpha + common as f64);
                for &j in users[u].intersection(users[v]) {
                    if j > i {
                        *scores.entry((i, j)).or_insert(0.0) += w;
                    }
                }
            }
        }
    }
    let mut neighbors: BTreeMap<ItemId, Vec<(ItemId, f64)>> = BTreeMap::new();
    for ((i, j), s) in scores {
        neighbors.entry(i).or_default().push((j, s));
        neighbors.entry(j).or_default().push((i, s));
    }
    for list in neighbors.values_mut() {
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if let Some(n) = top_n {
            list.truncate(n);
        }
    }
    Ok(I2ITable { neighbors })
}

/// Union of the top `per_seed` neighbors of each seed, scored by the maximum
/// across seeds and ordered by that score, then item id. Seeds themselves are
/// not returned.
pub fn i2i_expand(seeds: &[ItemId], table: &I2ITable, per_seed: usize) -> RecallSet {
    let seed_set: BTreeSet<ItemId> = seeds.iter().copied().collect();
    let mut best: BTreeMap<ItemId, f64> = BTreeMap::new();
    for s in seeds {
        let Some(list) = table.neighbors.get(s) else { continue };
        for &(n, score) in list.iter().take(per_seed) {
            if seed_set.contains(&n) {
                continue;
            }
            let e = best.entry(n).or_insert(score);
            *e = e.max(score);
        }
    }
    let mut entries: Vec<Recalled> = best
        .into_iter()
        .map(|(item_id, score)| Recalled {
            item_id,
            source: Source::I2i,
            score,
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
    RecallSet { entries }
}

/// Direct hits, then cluster expansions, then I2I expansions, each tier keeping
/// its own order. Later duplicates are dropped and the result is cut at `cap`.
pub fn merge_recall(direct: &RecallSet, cluster: &RecallSet, i2i: &RecallSet, cap: usize) -> RecallSet {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (tier, source) in [(direct, Source::Direct), (cluster, Source::Cluster), (i2i, Source::I2i)] {
        for e in &tier.entries {
            if entries.len() == cap {
                return RecallSet { entries };
            }
            if seen.insert(e.item_id) {
                entries.push(Recalled { source, ..e.clone() });
            }
        }
    }
    RecallSet { entries }
}

/// Serving variant selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Direct,
    Cluster(usize),
    I2i,
    ClusterI2i(usize),
}

impl std::str::FromStr for Variant {
    type Err = Error;

    /// `direct`, `cluster-K`, `i2i` or `cluster-K-i2i`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown expansion variant {s:?}"));
        match s {
            "direct" => Ok(Self::Direct),
            "i2i" => Ok(Self::I2i),
            _ => {
                let rest = s.strip_prefix("cluster-").ok_or_else(bad)?;
                let (k, with_i2i) = match rest.strip_suffix("-i2i") {
                    Some(k) => (k, true),
                    None => (rest, false),
                };
                let k: usize = k.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(if with_i2i { Self::ClusterI2i(k) } else { Self::Cluster(k) })
            }
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Direct => write!(f, "direct"),
            Self::Cluster(k) => write!(f, "cluster-{k}"),
            Self::I2i => write!(f, "i2i"),
            Self::ClusterI2i(k) => write!(f, "cluster-{k}-i2i"),
        }
    }
}

/// Expands one query's decoded docIDs (best first) under `variant`.
pub fn expand(
    variant: Variant,
    decoded: &[(Vec<u32>, f64)],
    index: &DocIndex,
    i2i: Option<&I2ITable>,
    per_seed: usize,
    cap: usize,
) -> Result<RecallSet> {
    let mut hits = Vec::with_capacity(decoded.len());
    for (tokens, lp) in decoded {
        let item = index
            .trie()
            .lookup(tokens)
            .ok_or_else(|| Error::Index(format!("decoded docID {tokens:?} is not in the index")))?;
        hits.push((item, *lp));
    }
    let direct = RecallSet::direct(&hits);
    let seeds: Vec<ItemId> = hits.iter().map(|h| h.0).collect();
    let need_table = || i2i.ok_or_else(|| Error::Config(format!("variant {variant} needs an I2I table")));
    let tokens: Vec<Vec<u32>> = decoded.iter().map(|d| d.0.clone()).collect();
    let empty = RecallSet::default();
    Ok(match variant {
        Variant::Direct => merge_recall(&direct, &empty, &empty, cap),
        Variant::Cluster(k) => merge_recall(&direct, &cluster_expand(&tokens, index, k)?, &empty, cap),
        Variant::I2i => merge_recall(&direct, &empty, &i2i_expand(&seeds, need_table()?, per_seed), cap),
        Variant::ClusterI2i(k) => merge_recall(
            &direct,
            &cluster_expand(&tokens, index, k)?,
            &i2i_expand(&seeds, need_table()?, per_seed),
            cap,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[(u64, Source, f64)]) -> RecallSet {
        RecallSet {
            entries: items
                .iter()
                .map(|&(i, source, score)| Recalled {
                    item_id: ItemId(i),
                    source,
                    score,
                })
                .collect(),
        }
    }

    #[test]
    fn merge_priority_and_cap() {
        let d = set(&[(1, Source::Direct, -0.1)]);
        let c = set(&[(2, Source::Cluster, 0.9), (1, Source::Cluster, 0.5)]);
        let i = set(&[(1, Source::I2i, 3.0), (3, Source::I2i, 1.0)]);
        let m = merge_recall(&d, &c, &i, 10);
        assert_eq!(m.items(), vec![ItemId(1), ItemId(2), ItemId(3)]);
        assert_eq!(m.entries[0].source, Source::Direct);
        assert_eq!(merge_recall(&d, &c, &i, 0).recall_num(), 0);
        assert_eq!(merge_recall(&d, &c, &i, 2).items(), vec![ItemId(1), ItemId(2)]);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("direct".parse::<Variant>().unwrap(), Variant::Direct);
        assert_eq!("cluster-2".parse::<Variant>().unwrap(), Variant::Cluster(2));
        assert_eq!("cluster-3-i2i".parse::<Variant>().unwrap(), Variant::ClusterI2i(3));
        assert_eq!("i2i".parse::<Variant>().unwrap(), Variant::I2i);
        for bad in ["cluster-", "cluster-0", "cluster-x", "bogus"] {
            assert!(bad.parse::<Variant>().is_err(), "{bad}");
        }
        assert_eq!(Variant::ClusterI2i(2).to_string(), "cluster-2-i2i");
    }

    #[test]
    fn single_common_user_is_omitted() {
        let t = swing_scores(&[("u", ItemId(1)), ("u", ItemId(2))], 1.0, None).unwrap();
        assert!(t.neighbors.is_empty());
    }
}
