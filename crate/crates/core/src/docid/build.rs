use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::DocId;
use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocIdConfig {
    /// Branching factor of every k-means split.
    pub k: usize,
    /// Clusters with more items than this are split again.
    pub cluster_size: usize,
    /// Longest allowed docID, category tokens included.
    pub max_len: usize,
    /// Use the category path as the semantic layer. When false the whole
    /// catalog is clustered globally and docIDs have no category tokens.
    pub category_guided: bool,
    pub seed: u64,
}

impl Default for DocIdConfig {
    fn default() -> Self {
        Self {
            k: 10,
            cluster_size: 100,
            max_len: 6,
            category_guided: true,
            seed: 0,
        }
    }
}

impl DocIdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("docid k must be >= 2, got {}", self.k)));
        }
        if self.cluster_size == 0 {
            return Err(Error::Config("cluster_size must be >= 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for a cluster and an ordinal token".into()));
        }
        Ok(())
    }
}

/// Efficient score `E` for every docID prefix deeper than the semantic layer.
pub type NodeScores = BTreeMap<Vec<u32>, f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct DocIdAssignment {
    pub docids: BTreeMap<ItemId, DocId>,
    pub node_scores: NodeScores,
}

impl DocIdAssignment {
    /// Wraps externally assigned docIDs, deriving node scores from item scores.
    pub fn from_docids(docids: BTreeMap<ItemId, DocId>, scores: &BTreeMap<ItemId, f64>) -> Result<Self> {
        if let Some(id) = docids.keys().find(|id| !scores.contains_key(id)) {
            return Err(Error::Data(format!("item {id} has no efficient score")));
        }
        let node_scores = node_scores(&docids, scores);
        Ok(Self { docids, node_scores })
    }
}

/// Derives a child seed so sibling subtrees cluster independently but reproducibly.
fn child_seed(seed: u64, branch: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(branch.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn ordinal_tokens(members: &[usize], scores: &[f64], ids: &[ItemId], out: &mut [Vec<u32>]) {
    let mut order = members.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    for (ord, &m) in order.iter().enumerate() {
        out[m].push(ord as u32);
    }
}

fn subset(points: &Tensor2, members: &[usize]) -> Tensor2 {
    points.select(ndarray::Axis(0), members)
}

struct Splitter<'a> {
    points: &'a Tensor2,
    scores: &'a [f64],
    ids: &'a [ItemId],
    k: usize,
    cluster_size: usize,
}

impl Splitter<'_> {
    fn recurse(&self, members: &[usize], budget: usize, seed: u64, out: &mut [Vec<u32>]) -> Result<()> {
        if members.len() <= self.cluster_size {
            ordinal_tokens(members, self.scores, self.ids, out);
            return Ok(());
        }
        if budget < 2 {
            log::warn!(
                "cluster of {} items exceeds size {} with no depth left; enumerating",
                members.len(),
                self.cluster_size
            );
            ordinal_tokens(members, self.scores, self.ids, out);
            return Ok(());
        }
        let split = kmeans(&subset(self.points, members), self.k, seed)?;
        if split.non_empty() < 2 {
            log::warn!("cluster of {} items cannot be split further; enumerating", members.len());
            ordinal_tokens(members, self.scores, self.ids, out);
            return Ok(());
        }
        let mut groups = vec![Vec::new(); self.k];
        for (&m, &c) in members.iter().zip(&split.assignments) {
            groups[c].push(m);
        }
        for (c, group) in groups.iter().enumerate().filter(|(_, g)| !g.is_empty()) {
            for &m in group {
                out[m].push(c as u32);
            }
            self.recurse(group, budget - 1, child_seed(seed, c as u64), out)?;
        }
        Ok(())
    }
}

/// Sub-docID tokens for each row of `points`, at most `depth_budget` tokens each.
///
/// Groups larger than `cluster_size` are split with k-means and each part is
/// handled recursively; groups that fit are enumerated by descending score then
/// ascending item id.
pub fn hierarchical_cluster(
    points: &Tensor2,
    scores: &[f64],
    ids: &[ItemId],
    k: usize,
    cluster_size: usize,
    depth_budget: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if depth_budget == 0 {
        return Err(Error::Config("depth budget must be >= 1".into()));
    }
    if scores.len() != points.nrows() || ids.len() != points.nrows() {
        return Err(Error::dim("hierarchical_cluster", points.nrows(), format!("{} scores, {} ids", scores.len(), ids.len())));
    }
    let mut out = vec![Vec::new(); points.nrows()];
    let members: Vec<usize> = (0..points.nrows()).collect();
    let splitter = Splitter {
        points,
        scores,
        ids,
        k,
        cluster_size,
    };
    splitter.recurse(&members, depth_budget, seed, &mut out)?;
    Ok(out)
}

/// Assigns a docID to every item by clustering within each leaf category.
///
/// Each category always gets one k-means level; clusters still larger than
/// `cluster_size` recurse while the length budget allows.
pub fn build_docids(
    fusion: &BTreeMap<ItemId, Vec<f64>>,
    scores: &BTreeMap<ItemId, f64>,
    paths: &BTreeMap<ItemId, Vec<u32>>,
    config: &DocIdConfig,
) -> Result<DocIdAssignment> {
    config.validate()?;
    let mut missing: Vec<String> = Vec::new();
    for id in fusion.keys().chain(scores.keys()).chain(paths.keys()) {
        if !(fusion.contains_key(id) && scores.contains_key(id) && paths.contains_key(id)) {
            missing.push(id.to_string());
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Data(format!("items missing a fusion vector, score or category path: {}", missing.join(", "))));
    }
    let dim = fusion.values().next().map_or(0, Vec::len);
    if let Some((id, _)) = fusion.iter().find(|(_, v)| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Data(format!("fusion vector of item {id} has the wrong length or non-finite values")));
    }

    let mut groups: BTreeMap<Vec<u32>, Vec<ItemId>> = BTreeMap::new();
    for (id, path) in paths {
        let key = if config.category_guided { path.clone() } else { Vec::new() };
        if config.category_guided && key.is_empty() {
            return Err(Error::Data(format!("item {id} has an empty category path")));
        }
        groups.entry(key).or_default().push(*id);
    }
    let keys: Vec<&Vec<u32>> = groups.keys().collect();
    for w in keys.windows(2) {
        // Sorted order puts a prefix directly before some extension of it.
        if w[1].starts_with(w[0]) {
            return Err(Error::Data(format!("category path {:?} is a prefix of {:?}", w[0], w[1])));
        }
    }

    let mut docids = BTreeMap::new();
    for (g, (path, members)) in groups.iter().enumerate() {
        let s = path.len();
        if s + 2 > config.max_len {
            return Err(Error::Config(format!(
                "max_len {} leaves no room for cluster tokens after category path of length {s}",
                config.max_len
            )));
        }
        let mut points = Tensor2::zeros((members.len(), dim));
        for (r, id) in members.iter().enumerate() {
            points.row_mut(r).assign(&ndarray::ArrayView1::from(&fusion[id]));
        }
        let member_scores: Vec<f64> = members.iter().map(|id| scores[id]).collect();
        let seed = child_seed(config.seed, g as u64);
        let first = kmeans(&points, config.k, seed)?;
        let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (r, &c) in first.assignments.iter().enumerate() {
            by_cluster.entry(c).or_default().push(r);
        }
        for (c, rows) in by_cluster {
            let sub_points = subset(&points, &rows);
            let sub_scores: Vec<f64> = rows.iter().map(|&r| member_scores[r]).collect();
            let sub_ids: Vec<ItemId> = rows.iter().map(|&r| members[r]).collect();
            let rest = hierarchical_cluster(
                &sub_points,
                &sub_scores,
                &sub_ids,
                config.k,
                config.cluster_size,
                config.max_len - s - 1,
                child_seed(seed, c as u64),
            )?;
            for (id, tail) in sub_ids.iter().zip(rest) {
                let mut tokens = path.clone();
                tokens.push(c as u32);
                tokens.extend(tail);
                docids.insert(*id, DocId::new(tokens, s)?);
            }
        }
    }
    let node_scores = node_scores(&docids, scores);
    Ok(DocIdAssignment { docids, node_scores })
}

/// Mean member score of every prefix deeper than the semantic layer.
pub(crate) fn node_scores(docids: &BTreeMap<ItemId, DocId>, scores: &BTreeMap<ItemId, f64>) -> NodeScores {
    let mut acc: BTreeMap<Vec<u32>, (f64, usize)> = BTreeMap::new();
    for (id, d) in docids {
        for end in d.semantic_len + 1..=d.len() {
            let e = acc.entry(d.tokens[..end].to_vec()).or_insert((0.0, 0));
            e.0 += scores[id];
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<ItemId> {
        (0..n as u64).map(ItemId).collect()
    }

    #[test]
    fn small_group_is_enumerated_by_score() {
        let pts = Tensor2::zeros((5, 2));
        let scores = [0.1, 0.9, 0.5, 0.9, 0.0];
        let toks = hierarchical_cluster(&pts, &scores, &ids(5), 10, 100, 3, 0).unwrap();
        assert_eq!(toks, vec![vec![3], vec![0], vec![2], vec![1], vec![4]]);
    }

    #[test]
    fn identical_points_fall_back_to_ordinals() {
        let pts = Tensor2::from_elem((30, 2), 1.0);
        let toks = hierarchical_cluster(&pts, &[0.5; 30], &ids(30), 4, 8, 3, 0).unwrap();
        let mut flat: Vec<u32> = toks.iter().map(|t| {
            assert_eq!(t.len(), 1);
            t[0]
        }).collect();
        flat.sort();
        assert_eq!(flat, (0..30).collect::<Vec<u32>>());
    }

    #[test]
    fn single_item_category() {
        let fusion = BTreeMap::from([(ItemId(1), vec![0.3, 0.1])]);
        let scores = BTreeMap::from([(ItemId(1), 0.4)]);
        let paths = BTreeMap::from([(ItemId(1), vec![2, 202])]);
        let a = build_docids(&fusion, &scores, &paths, &DocIdConfig::default()).unwrap();
        assert_eq!(a.docids[&ItemId(1)].tokens, vec![2, 202, 0, 0]);
        assert_eq!(a.node_scores[&vec![2, 202, 0]], 0.4);
    }

    #[test]
    fn missing_inputs_are_listed() {
        let fusion = BTreeMap::from([(ItemId(1), vec![0.0]), (ItemId(2), vec![0.0])]);
        let scores = BTreeMap::from([(ItemId(1), 0.4)]);
        let paths = BTreeMap::from([(ItemId(1), vec![2]), (ItemId(3), vec![2])]);
        let err = build_docids(&fusion, &scores, &paths, &DocIdConfig::default()).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn prefix_paths_are_rejected() {
        let fusion = BTreeMap::from([(ItemId(1), vec![0.0]), (ItemId(2), vec![1.0])]);
        let scores = BTreeMap::from([(ItemId(1), 0.4), (ItemId(2), 0.4)]);
        let paths = BTreeMap::from([(ItemId(1), vec![2]), (ItemId(2), vec![2, 5])]);
        assert!(build_docids(&fusion, &scores, &paths, &DocIdConfig::default()).is_err());
    }
}
