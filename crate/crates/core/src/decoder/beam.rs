//! Trie-constrained beam search.

use std::cmp::Ordering;

use crate::data::ItemId;
use crate::docid::{DocIdTrie, NodeId};
use crate::error::{Error, Result};

/// Supplies next-token log-probabilities restricted to the allowed tokens.
pub trait StepScorer {
    /// Log-probability of each token in `allowed` (ascending) given `prefix`.
    fn log_probs(&self, prefix: &[u32], allowed: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub tokens: Vec<u32>,
    pub item: ItemId,
    pub log_prob: f64,
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<u32>,
    node: NodeId,
    log_prob: f64,
}

/// Higher log-probability first, then lexicographically smaller tokens.
fn rank(a_lp: f64, a_tok: &[u32], b_lp: f64, b_tok: &[u32]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_tok.cmp(b_tok))
}

/// Top `k` complete docIDs by total log-probability.
///
/// Hypotheses only follow trie edges and finish on reaching a leaf. At most
/// `beam_width` unfinished hypotheses survive each step. Ties are broken by
/// lexicographic token order, so when the beam is at least as wide as the
/// number of leaves the result equals exhaustive enumeration.
pub fn constrained_beam_search<S: StepScorer>(
    scorer: &S,
    trie: &DocIdTrie,
    beam_width: usize,
    k: usize,
) -> Result<Vec<BeamResult>> {
    if trie.is_empty() {
        return Err(Error::Index("cannot decode against an empty trie".into()));
    }
    if k == 0 || beam_width < k {
        return Err(Error::Config(format!("need beam_width >= k >= 1, got beam {beam_width}, k {k}")));
    }
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        node: trie.root(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<BeamResult> = Vec::new();
    while !active.is_empty() {
        let mut next = Vec::new();
        for hyp in &active {
            let (allowed, nodes): (Vec<u32>, Vec<NodeId>) = trie.children(hyp.node).unzip();
            let lps = scorer.log_probs(&hyp.tokens, &allowed)?;
            if lps.len() != allowed.len() {
                return Err(Error::dim("beam step", allowed.len(), lps.len()));
            }
            for ((tok, node), lp) in allowed.into_iter().zip(nodes).zip(lps) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let log_prob = hyp.log_prob + lp;
                match trie.item(node) {
                    Some(item) => finished.push(BeamResult { tokens, item, log_prob }),
                    None => next.push(Hypothesis { tokens, node, log_prob }),
                }
            }
        }
        next.sort_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
        next.truncate(beam_width);
        finished.sort_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
        finished.truncate(k);
        // Log-probabilities never increase along a path.
        if finished.len() == k && next.first().is_some_and(|h| h.log_prob < finished[k - 1].log_prob) {
            break;
        }
        active = next;
    }
    Ok(finished)
}
