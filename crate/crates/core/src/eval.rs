//! Retrieval metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ItemId;

/// Fraction of queries with at least one truth item in the top `k` predictions.
/// Queries with an empty truth set never count as hits.
pub fn recall_at_k(predictions: &[Vec<ItemId>], truths: &[Vec<ItemId>], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    assert_eq!(predictions.len(), truths.len(), "one truth set per query");
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(pred, truth)| pred.iter().take(k).any(|p| truth.contains(p)))
        .count();
    hits as f64 / predictions.len() as f64
}

/// Fraction of queries whose truth appears anywhere in an (unranked) recall set.
pub fn set_recall(recalled: &[Vec<ItemId>], truths: &[Vec<ItemId>]) -> f64 {
    if recalled.is_empty() {
        return 0.0;
    }
    let hits = recalled
        .iter()
        .zip(truths)
        .filter(|(set, truth)| set.iter().any(|p| truth.contains(p)))
        .count();
    hits as f64 / recalled.len() as f64
}

/// Area under the ROC curve with tied scores counted as half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l > 0.5).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l <= 0.5).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Recall@k for each k in `ks`.
pub fn recall_table(predictions: &[Vec<ItemId>], truths: &[Vec<ItemId>], ks: &[usize]) -> BTreeMap<usize, f64> {
    ks.iter().map(|&k| (k, recall_at_k(predictions, truths, k))).collect()
}

/// Wall-clock seconds spent per stage; excluded from reproducibility comparisons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings(pub BTreeMap<String, f64>);

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u64]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn perfect_and_empty() {
        let preds = vec![ids(&[1, 2]), ids(&[3])];
        let truth = vec![ids(&[1]), ids(&[3])];
        assert_eq!(recall_at_k(&preds, &truth, 1), 1.0);
        let truth = vec![ids(&[9]), ids(&[9])];
        assert_eq!(recall_at_k(&preds, &truth, 5), 0.0);
    }

    #[test]
    fn hits_at_ranks_one_five_twelve() {
        let ranked = |hit: usize| -> Vec<ItemId> { (1..=20).map(|r| ItemId(if r == hit { 0 } else { 100 + r as u64 })).collect() };
        let preds = vec![ranked(1), ranked(5), ranked(12)];
        let truth = vec![ids(&[0]); 3];
        assert!((recall_at_k(&preds, &truth, 10) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn multi_truth_counts_once() {
        let preds = vec![ids(&[4, 5])];
        let truth = vec![ids(&[5, 4])];
        assert_eq!(recall_at_k(&preds, &truth, 2), 1.0);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.9], &[1.0, 0.0]), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[1.0, 0.0]), 0.5);
    }
}
