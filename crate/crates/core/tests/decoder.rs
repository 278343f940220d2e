use std::collections::{BTreeMap, BTreeSet};

use higen::data::{Catalog, ContextEvent, DatasetRow, Item, ItemId};
use higen::decoder::{
    constrained_beam_search, hierarchical_weight, train_decoder, BeamResult, DecoderConfig, DecoderModel, DecoderSample,
    PositionWeights, RelevanceOracle, StepScorer,
};
use higen::docid::{DocId, DocIdAssignment, DocIndex};
use higen::features::FeatureVocab;
use higen::nn::finite_diff_gradcheck;
use higen::train::TrainConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn index_from(docids: &[(u64, Vec<u32>, usize, f64)]) -> DocIndex {
    let map: BTreeMap<ItemId, DocId> =
        docids.iter().map(|(i, t, s, _)| (ItemId(*i), DocId::new(t.clone(), *s).unwrap())).collect();
    let scores: BTreeMap<ItemId, f64> = docids.iter().map(|(i, _, _, e)| (ItemId(*i), *e)).collect();
    DocIndex::new(DocIdAssignment::from_docids(map, &scores).unwrap()).unwrap()
}

/// A random three-level index: category, cluster, ordinal.
fn random_index(seed: u64, n: usize) -> DocIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut docids = Vec::new();
    let mut id = 0;
    while docids.len() < n {
        let toks = vec![rng.random_range(1..5), rng.random_range(0..4), rng.random_range(0..6)];
        if seen.insert(toks.clone()) {
            docids.push((id, toks, 1, rng.random_range(0.0..1.0)));
            id += 1;
        }
    }
    index_from(&docids)
}

fn catalog_and_rows(index: &DocIndex, n_rows: usize) -> (Catalog, Vec<DatasetRow>) {
    let items: Vec<Item> = index
        .docids()
        .iter()
        .map(|(id, d)| Item {
            item_id: *id,
            category_path: d.semantic().to_vec(),
            semantic: vec![0.0],
            efficiency: vec![0.0],
            score: 0.5,
        })
        .collect();
    let catalog = Catalog::new(items).unwrap();
    let ids: Vec<ItemId> = index.docids().keys().copied().collect();
    let rows = (0..n_rows)
        .map(|i| DatasetRow {
            user_id: format!("u{}", i % 3),
            query: format!("query{i} shared"),
            context: vec![ContextEvent {
                item_id: ids[(i * 7) % ids.len()],
                behavior: "click".into(),
            }],
            target_item: ids[i % ids.len()],
            relevance: 1,
            click: 1,
            timestamp: i as u64,
        })
        .collect();
    (catalog, rows)
}

fn small_config() -> DecoderConfig {
    DecoderConfig {
        user_dim: 3,
        key_dim: 3,
        hidden_dim: 6,
        ..DecoderConfig::default()
    }
}

#[test]
fn two_position_weights_match_closed_form() {
    let e = std::f64::consts::E;
    let denom = 1.0 + e + e * e;
    let expected = [e * e / denom, e / denom, 1.0 / denom];
    for (t, want) in expected.iter().enumerate() {
        let got = hierarchical_weight(t, 2).unwrap();
        assert!((got - want).abs() < 1e-15);
    }
    let printed = [0.665241, 0.244728, 0.090031];
    for (t, want) in printed.iter().enumerate() {
        assert!((hierarchical_weight(t, 2).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn irrelevant_first_token_weight() {
    let w = PositionWeights::decay(3, 0.8, 0.1, 0.1).unwrap();
    let got = w.weight(0, 1, 4, 9, None, None, &RelevanceOracle::default()).unwrap();
    assert!((got - 0.632193).abs() < 1e-6, "{got}");
    let related = RelevanceOracle::new([(4, 9, 0.8)]).unwrap();
    let got = w.weight(0, 1, 4, 9, None, None, &related).unwrap();
    assert!((got - 0.8 * w.hierarchical[0]).abs() < 1e-15);
}

proptest! {
    #[test]
    fn decay_weights_are_a_distribution(max_pos in 0usize..=16) {
        let w: Vec<f64> = (0..=max_pos).map(|t| hierarchical_weight(t, max_pos).unwrap()).collect();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        prop_assert!(w.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn semantic_and_efficiency_terms_stay_in_their_layers(
        t in 0usize..6, s in 0usize..4, a in 0u32..5, b in 0u32..5, ea in 0.0f64..1.0, eb in 0.0f64..1.0,
    ) {
        let only_s = PositionWeights { hierarchical: vec![0.0; 6], lambda_h: 0.0, lambda_s: 1.0, lambda_e: 0.0 };
        let only_e = PositionWeights { hierarchical: vec![0.0; 6], lambda_h: 0.0, lambda_s: 0.0, lambda_e: 1.0 };
        let o = RelevanceOracle::default();
        let ws = only_s.weight(t, s, a, b, Some(ea), Some(eb), &o).unwrap();
        let we = only_e.weight(t, s, a, b, Some(ea), Some(eb), &o).unwrap();
        prop_assert!(ws == 0.0 || ws == 1.0);
        if t >= s { prop_assert_eq!(ws, 0.0); }
        prop_assert!(we >= 0.0);
        if t < s { prop_assert_eq!(we, 0.0); }
    }
}

fn zero_model_with_biases(index: &DocIndex, vocab: FeatureVocab, biases: &[Vec<f64>]) -> DecoderModel {
    let mut m = DecoderModel::new(small_config(), vocab, index, 0).unwrap();
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        m.store.get_mut(id).fill(0.0);
    }
    for (t, b) in biases.iter().enumerate() {
        let id = m.store.find(&format!("head.{t}.0.bias")).unwrap();
        m.store.get_mut(id).row_mut(0).assign(&ndarray::ArrayView1::from(b));
    }
    m
}

#[test]
fn hand_set_logits_match_scalar_computation() {
    let index = index_from(&[(1, vec![1, 0], 1, 0.2), (2, vec![1, 1], 1, 0.6), (3, vec![2, 0], 1, 0.9)]);
    let (catalog, rows) = catalog_and_rows(&index, 3);
    let vocab = FeatureVocab::build(&rows, &catalog, 3, 2).unwrap();
    let m = zero_model_with_biases(&index, vocab.clone(), &[vec![0.3, 1.1], vec![0.5, -0.2]]);
    let sample = DecoderSample {
        context: vocab.encode_row(&rows[0]),
        item: ItemId(2),
        docid: index.docid(ItemId(2)).unwrap().clone(),
    };
    let weights = m.position_weights().unwrap();
    let loss = m.loss_with(&m.store, &[sample], &index, &RelevanceOracle::default(), &weights).unwrap();

    let e = std::f64::consts::E;
    let (h0, h1) = (e / (1.0 + e), 1.0 / (1.0 + e));
    let lp0 = 0.3 - (0.3f64.exp() + 1.1f64.exp()).ln();
    let lp1 = -0.2 - (0.5f64.exp() + (-0.2f64).exp()).ln();
    // greedy picks category 2 (irrelevant) then cluster 0 with score 0.2
    let w0 = 0.8 * h0 + 0.1;
    let w1 = 0.8 * h1 + 0.1 * (0.6f64 - 0.2).abs();
    let expected = -(w0 * lp0 + w1 * lp1);
    assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
}

#[test]
fn uniform_weights_give_mean_token_cross_entropy() {
    let index = random_index(3, 30);
    let (catalog, rows) = catalog_and_rows(&index, 8);
    let vocab = FeatureVocab::build(&rows, &catalog, 3, 2).unwrap();
    let m = DecoderModel::new(small_config(), vocab.clone(), &index, 5).unwrap();
    let samples = DecoderSample::from_rows(&rows, &vocab, &index).unwrap();
    let oracle = RelevanceOracle::default();
    let uniform = m.loss_with(&m.store, &samples, &index, &oracle, &PositionWeights::uniform(3)).unwrap();
    let unit = PositionWeights {
        hierarchical: vec![1.0; 3],
        lambda_h: 1.0,
        lambda_s: 0.0,
        lambda_e: 0.0,
    };
    let plain = m.loss_with(&m.store, &samples, &index, &oracle, &unit).unwrap();
    assert!((uniform - plain / 3.0).abs() < 1e-12);
}

#[test]
fn confident_correct_model_has_near_zero_loss() {
    let index = index_from(&[(1, vec![1, 0], 1, 0.2), (2, vec![2, 0], 1, 0.6)]);
    let (catalog, rows) = catalog_and_rows(&index, 2);
    let vocab = FeatureVocab::build(&rows, &catalog, 3, 2).unwrap();
    let m = zero_model_with_biases(&index, vocab.clone(), &[vec![40.0, -40.0], vec![0.0]]);
    let sample = DecoderSample {
        context: vocab.encode_row(&rows[0]),
        item: ItemId(1),
        docid: index.docid(ItemId(1)).unwrap().clone(),
    };
    let loss = m
        .loss_with(&m.store, &[sample], &index, &RelevanceOracle::default(), &m.position_weights().unwrap())
        .unwrap();
    assert!(loss < 1e-30);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let index = random_index(4, 25);
    let (catalog, rows) = catalog_and_rows(&index, 2);
    let vocab = FeatureVocab::build(&rows, &catalog, 3, 2).unwrap();
    let samples = DecoderSample::from_rows(&rows, &vocab, &index).unwrap();
    let oracle = RelevanceOracle::new([(1, 2, 0.9)]).unwrap();
    for position_aware in [true, false] {
        let config = DecoderConfig {
            position_aware,
            ..small_config()
        };
        let m = DecoderModel::new(config, vocab.clone(), &index, 9).unwrap();
        let w = m.position_weights().unwrap();
        let (_, grads) = m.loss_and_grads(&m.store, &samples, &index, &oracle, &w).unwrap();
        let report = finite_diff_gradcheck(|s| m.loss_with(s, &samples, &index, &oracle, &w).unwrap(), &m.store, &grads, 1e-5);
        let (rel, abs) = report.split_at_floor(1e-8);
        assert!(rel < 1e-4 && abs < 1e-9, "position_aware={position_aware}: rel {rel} abs {abs}");
    }
}

/// Deterministic pseudo-random next-token distribution, with coarse logits so
/// ties are common.
struct HashScorer(u64);

impl StepScorer for HashScorer {
    fn log_probs(&self, prefix: &[u32], allowed: &[u32]) -> higen::Result<Vec<f64>> {
        let logits: Vec<f64> = allowed
            .iter()
            .map(|&a| {
                let mut h = self.0 ^ 0xcbf2_9ce4_8422_2325;
                for &p in prefix.iter().chain(std::iter::once(&a)) {
                    h = (h ^ p as u64).wrapping_mul(0x100_0000_01b3);
                }
                ((h >> 33) % 3) as f64
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|l| l - lse).collect())
    }
}

/// Scores every docID independently of the trie and sorts by the tie-break rule.
fn brute_force<S: StepScorer>(scorer: &S, index: &DocIndex) -> Vec<BeamResult> {
    let all: Vec<(ItemId, Vec<u32>)> = index.docids().iter().map(|(i, d)| (*i, d.tokens.clone())).collect();
    let mut out: Vec<BeamResult> = all
        .iter()
        .map(|(item, tokens)| {
            let mut lp = 0.0;
            for t in 0..tokens.len() {
                let allowed: BTreeSet<u32> =
                    all.iter().filter(|(_, o)| o.len() > t && o[..t] == tokens[..t]).map(|(_, o)| o[t]).collect();
                let allowed: Vec<u32> = allowed.into_iter().collect();
                let lps = scorer.log_probs(&tokens[..t], &allowed).unwrap();
                lp += lps[allowed.iter().position(|&a| a == tokens[t]).unwrap()];
            }
            BeamResult {
                tokens: tokens.clone(),
                item: *item,
                log_prob: lp,
            }
        })
        .collect();
    out.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
    out
}

#[test]
fn wide_beam_equals_exhaustive_ranking() {
    for seed in 0..20 {
        let index = random_index(seed, 1 + (seed as usize * 9) % 80);
        let scorer = HashScorer(seed);
        let n = index.len();
        let got = constrained_beam_search(&scorer, index.trie(), n, n).unwrap();
        assert_eq!(got, brute_force(&scorer, &index), "seed {seed}");
        let top3 = constrained_beam_search(&scorer, index.trie(), n, n.min(3)).unwrap();
        assert_eq!(top3[..], got[..n.min(3)]);
    }
}

#[test]
fn beam_edge_cases() {
    let single = index_from(&[(7, vec![1, 0, 0], 1, 0.5)]);
    let r = constrained_beam_search(&HashScorer(1), single.trie(), 1, 1).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].item, ItemId(7));
    assert_eq!(r[0].log_prob, 0.0);

    let two = index_from(&[(1, vec![1, 0], 1, 0.5), (2, vec![1, 1], 1, 0.5)]);
    assert_eq!(constrained_beam_search(&HashScorer(1), two.trie(), 3, 3).unwrap().len(), 2);
    assert!(constrained_beam_search(&HashScorer(1), two.trie(), 1, 2).is_err());
}

#[test]
fn narrow_beam_only_returns_indexed_docids() {
    for seed in 0..10 {
        let index = random_index(seed + 100, 60);
        let r = constrained_beam_search(&HashScorer(seed), index.trie(), 4, 4).unwrap();
        assert_eq!(r.len(), 4);
        for res in &r {
            assert_eq!(index.trie().lookup(&res.tokens), Some(res.item));
            assert!(res.log_prob <= 0.0);
        }
    }
}

#[test]
fn decoder_memorizes_twenty_queries() {
    let index = random_index(7, 40);
    let (catalog, rows) = catalog_and_rows(&index, 20);
    let vocab = FeatureVocab::build(&rows, &catalog, 3, 2).unwrap();
    let samples = DecoderSample::from_rows(&rows, &vocab, &index).unwrap();
    let config = DecoderConfig {
        hidden_dim: 32,
        user_dim: 4,
        key_dim: 8,
        ..DecoderConfig::default()
    };
    let mut m = DecoderModel::new(config, vocab, &index, 1).unwrap();
    let train = TrainConfig {
        lr: 0.01,
        batch_size: 10,
        epochs: 150,
        seed: 2,
        smoothing_window: 5,
    };
    let log = train_decoder(&mut m, &samples, &index, &RelevanceOracle::default(), &train).unwrap();
    assert!(log.position_accuracy.last().unwrap().iter().all(|&a| a == 1.0), "{:?}", log.position_accuracy.last());
    for s in &samples {
        let top = m.decode(&s.context, &index, 5, 1).unwrap();
        assert_eq!(top[0].item, s.item);
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let index = random_index(8, 20);
    let (catalog, rows) = catalog_and_rows(&index, 10);
    let vocab = FeatureVocab::build(&rows, &catalog, 3, 2).unwrap();
    let samples = DecoderSample::from_rows(&rows, &vocab, &index).unwrap();
    let train = TrainConfig {
        lr: 0.01,
        batch_size: 4,
        epochs: 3,
        seed: 2,
        smoothing_window: 3,
    };
    let run = || {
        let mut m = DecoderModel::new(small_config(), vocab.clone(), &index, 1).unwrap();
        train_decoder(&mut m, &samples, &index, &RelevanceOracle::default(), &train).unwrap();
        m
    };
    let (a, b) = (run(), run());
    assert_eq!(a.store, b.store);
    let dir = tempfile::tempdir().unwrap();
    a.save(&dir.path().join("d.json")).unwrap();
    let back = DecoderModel::load(&dir.path().join("d.json")).unwrap();
    assert_eq!(back.store, a.store);
    assert_eq!(back.decode(&samples[0].context, &index, 5, 5).unwrap(), a.decode(&samples[0].context, &index, 5, 5).unwrap());
}

#[test]
fn unknown_target_token_is_a_data_error() {
    let index = index_from(&[(1, vec![1, 0], 1, 0.2), (2, vec![2, 0], 1, 0.6)]);
    let (catalog, rows) = catalog_and_rows(&index, 2);
    let vocab = FeatureVocab::build(&rows, &catalog, 3, 2).unwrap();
    let m = DecoderModel::new(small_config(), vocab.clone(), &index, 0).unwrap();
    let bad = DecoderSample {
        context: vocab.encode_row(&rows[0]),
        item: ItemId(1),
        docid: DocId::new(vec![9, 0], 1).unwrap(),
    };
    let err = m
        .loss_with(&m.store, &[bad], &index, &RelevanceOracle::default(), &m.position_weights().unwrap())
        .unwrap_err();
    assert!(matches!(err, higen::Error::Data(_)), "{err}");
}
