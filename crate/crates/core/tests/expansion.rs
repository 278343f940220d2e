use std::collections::{BTreeMap, BTreeSet};

use higen::data::ItemId;
use higen::docid::{build_docids, DocIdConfig, DocIndex};
use higen::expansion::{
    cluster_expand, expand, i2i_expand, merge_recall, swing_scores, I2ITable, RecallSet, Source, Variant,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_index(seed: u64, n: usize) -> DocIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ItemId> = (0..n as u64).map(ItemId).collect();
    let fusion = ids.iter().map(|&i| (i, vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).collect();
    let scores = ids.iter().map(|&i| (i, rng.random_range(0.0..1.0))).collect();
    let paths = ids.iter().map(|&i| (i, vec![rng.random_range(1..4)])).collect();
    let config = DocIdConfig {
        k: 3,
        cluster_size: 4,
        max_len: 5,
        category_guided: true,
        seed,
    };
    DocIndex::new(build_docids(&fusion, &scores, &paths, &config).unwrap()).unwrap()
}

fn pick_decoded(index: &DocIndex, seed: u64, count: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<Vec<u32>> = index.docids().values().map(|d| d.tokens.clone()).collect();
    (0..count).map(|_| all[rng.random_range(0..all.len())].clone()).collect()
}

#[test]
fn full_prefix_returns_decoded_items_only() {
    let index = random_index(1, 60);
    let decoded = pick_decoded(&index, 2, 4);
    let max = index.max_len();
    let r = cluster_expand(&decoded, &index, max).unwrap();
    let want: BTreeSet<ItemId> = decoded.iter().map(|d| index.trie().lookup(d).unwrap()).collect();
    assert_eq!(r.items().into_iter().collect::<BTreeSet<_>>(), want);
    assert!(r.entries.iter().all(|e| e.source == Source::Direct));
}

#[test]
fn shared_category_prefix_pulls_in_siblings() {
    let index = random_index(3, 40);
    let decoded = pick_decoded(&index, 1, 1);
    let r = cluster_expand(&decoded, &index, 1).unwrap();
    let want: BTreeSet<ItemId> =
        index.docids().iter().filter(|(_, d)| d.tokens[0] == decoded[0][0]).map(|(i, _)| *i).collect();
    assert_eq!(r.items().into_iter().collect::<BTreeSet<_>>(), want);
    // direct first, then by descending leaf score
    assert_eq!(r.entries[0].source, Source::Direct);
    let tail: Vec<f64> = r.entries[1..].iter().map(|e| e.score).collect();
    assert!(tail.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn unknown_decoded_docid_is_rejected() {
    let index = random_index(3, 10);
    assert!(cluster_expand(&[vec![99, 99]], &index, 1).is_err());
    assert!(cluster_expand(&pick_decoded(&index, 0, 1), &index, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shorter_prefixes_recall_supersets(seed in 0u64..5000, n in 2usize..120, count in 1usize..6) {
        let index = random_index(seed, n);
        let decoded = pick_decoded(&index, seed + 1, count);
        let mut prev: Option<BTreeSet<ItemId>> = None;
        for k in (1..=index.max_len()).rev() {
            let r = cluster_expand(&decoded, &index, k).unwrap();
            let set: BTreeSet<ItemId> = r.items().into_iter().collect();
            prop_assert_eq!(set.len(), r.recall_num());
            if let Some(p) = &prev {
                prop_assert!(set.is_superset(p));
            }
            prev = Some(set);
        }
    }

    #[test]
    fn swing_is_symmetric_and_matches_brute_force(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<(u32, ItemId)> = (0..40).map(|_| (rng.random_range(0..8), ItemId(rng.random_range(0..10)))).collect();
        let t = swing_scores(&rows, 1.0, None).unwrap();
        let mut sets: BTreeMap<u32, BTreeSet<ItemId>> = BTreeMap::new();
        for (u, i) in &rows {
            sets.entry(*u).or_default().insert(*i);
        }
        let users: Vec<&BTreeSet<ItemId>> = sets.values().collect();
        for i in 0..10u64 {
            for j in 0..10u64 {
                if i == j { continue; }
                let (a, b) = (ItemId(i), ItemId(j));
                let mut expect = 0.0;
                let mut pairs = 0;
                for u in 0..users.len() {
                    for v in u + 1..users.len() {
                        if users[u].contains(&a) && users[u].contains(&b) && users[v].contains(&a) && users[v].contains(&b) {
                            expect += 1.0 / (1.0 + users[u].intersection(users[v]).count() as f64);
                            pairs += 1;
                        }
                    }
                }
                match t.score(a, b) {
                    Some(s) => {
                        prop_assert!((s - expect).abs() < 1e-12);
                        prop_assert_eq!(Some(s), t.score(b, a));
                    }
                    None => prop_assert_eq!(pairs, 0),
                }
            }
        }
    }

    #[test]
    fn merge_keeps_direct_hits(seed in 0u64..1000, cap in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng, n: usize| RecallSet::direct(
            &(0..n).map(|_| (ItemId(rng.random_range(0..20)), rng.random_range(-3.0..0.0))).collect::<Vec<_>>());
        let (d, c, i) = (mk(&mut rng, 5), mk(&mut rng, 10), mk(&mut rng, 10));
        let m = merge_recall(&d, &c, &i, cap);
        prop_assert!(m.recall_num() <= cap);
        let unique: BTreeSet<ItemId> = m.items().into_iter().collect();
        prop_assert_eq!(unique.len(), m.recall_num());
        if cap >= d.recall_num() {
            for e in &d.entries {
                prop_assert!(unique.contains(&e.item_id));
            }
        }
    }
}

#[test]
fn swing_closed_form_for_two_users() {
    let rows = [("u1", ItemId(1)), ("u1", ItemId(2)), ("u2", ItemId(1)), ("u2", ItemId(2)), ("u2", ItemId(2))];
    let t = swing_scores(&rows, 1.0, None).unwrap();
    assert!((t.score(ItemId(1), ItemId(2)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn i2i_expansion_rules() {
    let table = I2ITable {
        neighbors: BTreeMap::from([
            (ItemId(1), vec![(ItemId(5), 0.9), (ItemId(6), 0.5), (ItemId(7), 0.1)]),
            (ItemId(2), vec![(ItemId(6), 0.8)]),
        ]),
    };
    assert_eq!(i2i_expand(&[ItemId(1)], &table, 0).recall_num(), 0);
    assert_eq!(i2i_expand(&[ItemId(1)], &table, 2).items(), vec![ItemId(5), ItemId(6)]);
    let both = i2i_expand(&[ItemId(1), ItemId(2)], &table, 3);
    assert_eq!(both.items(), vec![ItemId(5), ItemId(6), ItemId(7)]);
    assert_eq!(both.entries[1].score, 0.8);
    assert_eq!(i2i_expand(&[ItemId(9)], &table, 3).recall_num(), 0);
}

#[test]
fn i2i_table_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<(u32, ItemId)> = (0..30).map(|k| (k % 5, ItemId((k * 7 % 9) as u64))).collect();
    let t = swing_scores(&rows, 1.0, Some(3)).unwrap();
    assert!(t.neighbors.values().all(|l| l.len() <= 3));
    t.save(&dir.path().join("i2i.jsonl")).unwrap();
    assert_eq!(I2ITable::load(&dir.path().join("i2i.jsonl")).unwrap(), t);
}

#[test]
fn variants_compose() {
    let index = random_index(5, 50);
    let decoded: Vec<(Vec<u32>, f64)> = pick_decoded(&index, 3, 2).into_iter().map(|d| (d, -0.5)).collect();
    let direct = expand(Variant::Direct, &decoded, &index, None, 10, 100).unwrap();
    let cluster = expand(Variant::Cluster(1), &decoded, &index, None, 10, 100).unwrap();
    assert!(cluster.recall_num() >= direct.recall_num());
    assert_eq!(cluster.items()[..direct.recall_num()], direct.items()[..]);
    assert!(expand(Variant::I2i, &decoded, &index, None, 10, 100).is_err());
    let capped = expand(Variant::Cluster(1), &decoded, &index, None, 10, 1).unwrap();
    assert_eq!(capped.recall_num(), 1);
}
