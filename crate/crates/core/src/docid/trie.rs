use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use super::build::{DocIdAssignment, NodeScores};
use super::DocId;
use crate::data::ItemId;
use crate::error::{Error, Result};

/// Handle to a node of a [`DocIdTrie`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug, PartialEq)]
struct Node {
    depth: usize,
    children: BTreeMap<u32, usize>,
    item: Option<ItemId>,
    score: Option<f64>,
    leaves: Range<usize>,
}

impl Node {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            children: BTreeMap::new(),
            item: None,
            score: None,
            leaves: 0..0,
        }
    }
}

/// Prefix tree over docIDs with children kept in token order.
///
/// Leaves are numbered in depth-first order, so the items below any node form
/// one contiguous slice of [`DocIdTrie::items_under`].
#[derive(Clone, Debug, PartialEq)]
pub struct DocIdTrie {
    nodes: Vec<Node>,
    leaf_items: Vec<ItemId>,
}

impl DocIdTrie {
    /// Builds the trie. Duplicate docIDs and docIDs that prefix another are
    /// rejected, as is any sub-semantic node without a finite score.
    pub fn build<'a>(docids: impl IntoIterator<Item = (ItemId, &'a DocId)>, scores: &NodeScores) -> Result<Self> {
        let mut nodes = vec![Node::new(0)];
        for (item, docid) in docids {
            let mut cur = 0;
            for (t, &tok) in docid.tokens.iter().enumerate() {
                if let Some(other) = nodes[cur].item {
                    return Err(Error::Index(format!("docID of item {other} is a prefix of {docid} (item {item})")));
                }
                cur = match nodes[cur].children.get(&tok) {
                    Some(&next) => next,
                    None => {
                        nodes.push(Node::new(t + 1));
                        let next = nodes.len() - 1;
                        nodes[cur].children.insert(tok, next);
                        next
                    }
                };
                if t + 1 > docid.semantic_len {
                    let prefix = &docid.tokens[..=t];
                    let score = scores
                        .get(prefix)
                        .copied()
                        .filter(|s| s.is_finite())
                        .ok_or_else(|| Error::Index(format!("no finite score for docID prefix {prefix:?}")))?;
                    nodes[cur].score = Some(score);
                }
            }
            if !nodes[cur].children.is_empty() {
                return Err(Error::Index(format!("docID {docid} (item {item}) is a prefix of another docID")));
            }
            if let Some(other) = nodes[cur].item {
                return Err(Error::Index(format!("duplicate docID {docid} for items {other} and {item}")));
            }
            nodes[cur].item = Some(item);
        }
        let mut trie = Self {
            nodes,
            leaf_items: Vec::new(),
        };
        trie.number_leaves(0);
        Ok(trie)
    }

    fn number_leaves(&mut self, root: usize) {
        // Explicit stack; (node, children visited).
        let mut stack = vec![(root, false)];
        while let Some((n, done)) = stack.pop() {
            if done {
                let start = self.nodes[n].children.values().next().map_or(self.leaf_items.len(), |&c| self.nodes[c].leaves.start);
                self.nodes[n].leaves = start..self.leaf_items.len();
                continue;
            }
            if let Some(item) = self.nodes[n].item {
                let i = self.leaf_items.len();
                self.leaf_items.push(item);
                self.nodes[n].leaves = i..i + 1;
                continue;
            }
            stack.push((n, true));
            for &c in self.nodes[n].children.values().rev() {
                stack.push((c, false));
            }
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_items.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn child(&self, node: NodeId, token: u32) -> Option<NodeId> {
        self.nodes[node.0].children.get(&token).map(|&c| NodeId(c))
    }

    /// Children in ascending token order.
    pub fn children(&self, node: NodeId) -> impl Iterator<Item = (u32, NodeId)> + '_ {
        self.nodes[node.0].children.iter().map(|(&t, &c)| (t, NodeId(c)))
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.nodes[node.0].item.is_some()
    }

    pub fn item(&self, node: NodeId) -> Option<ItemId> {
        self.nodes[node.0].item
    }

    /// Efficient score of a node below the semantic layer.
    pub fn score(&self, node: NodeId) -> Option<f64> {
        self.nodes[node.0].score
    }

    /// Number of tokens on the path from the root.
    pub fn depth(&self, node: NodeId) -> usize {
        self.nodes[node.0].depth
    }

    pub fn walk(&self, prefix: &[u32]) -> Option<NodeId> {
        prefix.iter().try_fold(self.root(), |n, &t| self.child(n, t))
    }

    pub fn lookup(&self, tokens: &[u32]) -> Option<ItemId> {
        self.walk(tokens).and_then(|n| self.item(n))
    }

    /// Items below `node` in depth-first (lexicographic docID) order.
    pub fn items_under(&self, node: NodeId) -> &[ItemId] {
        &self.leaf_items[self.nodes[node.0].leaves.clone()]
    }

    /// Every (docID tokens, item) pair in lexicographic order.
    pub fn enumerate(&self) -> Vec<(Vec<u32>, ItemId)> {
        let mut out = Vec::with_capacity(self.leaf_items.len());
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, prefix)) = stack.pop() {
            if let Some(item) = self.nodes[n].item {
                out.push((prefix, item));
                continue;
            }
            for (&t, &c) in self.nodes[n].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}

/// Everything retrieval needs: docIDs, their node scores and the trie.
#[derive(Clone, Debug, PartialEq)]
pub struct DocIndex {
    docids: BTreeMap<ItemId, DocId>,
    node_scores: NodeScores,
    trie: DocIdTrie,
    position_values: Vec<BTreeSet<u32>>,
}

impl DocIndex {
    pub fn new(assignment: DocIdAssignment) -> Result<Self> {
        let DocIdAssignment { docids, node_scores } = assignment;
        let trie = DocIdTrie::build(docids.iter().map(|(i, d)| (*i, d)), &node_scores)?;
        let max_len = docids.values().map(DocId::len).max().unwrap_or(0);
        let mut position_values = vec![BTreeSet::new(); max_len];
        for d in docids.values() {
            for (t, &tok) in d.tokens.iter().enumerate() {
                position_values[t].insert(tok);
            }
        }
        Ok(Self {
            docids,
            node_scores,
            trie,
            position_values,
        })
    }

    pub fn trie(&self) -> &DocIdTrie {
        &self.trie
    }

    pub fn docids(&self) -> &BTreeMap<ItemId, DocId> {
        &self.docids
    }

    pub fn node_scores(&self) -> &NodeScores {
        &self.node_scores
    }

    pub fn docid(&self, item: ItemId) -> Option<&DocId> {
        self.docids.get(&item)
    }

    pub fn len(&self) -> usize {
        self.docids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docids.is_empty()
    }

    /// Length of the longest docID.
    pub fn max_len(&self) -> usize {
        self.position_values.len()
    }

    /// Distinct token values occurring at position `t`, ascending.
    pub fn position_values(&self, t: usize) -> &BTreeSet<u32> {
        &self.position_values[t]
    }

    /// Efficient score of the item's own leaf.
    pub fn leaf_score(&self, item: ItemId) -> Option<f64> {
        self.docids.get(&item).and_then(|d| self.node_scores.get(&d.tokens).copied())
    }
}
