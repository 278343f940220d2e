use std::collections::BTreeMap;

use higen::data::{ItemId, PageView};
use higen::fusion::{
    intra_inter_distances, mine_triplets, read_fusion_jsonl, train_metric, triplet_loss, write_fusion_jsonl, FusionConfig,
    FusionModel, TripletInputs,
};
use higen::nn::finite_diff_gradcheck;
use higen::representation::AtomicEmbeddings;
use higen::train::TrainConfig;
use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 4;

/// Items with a weak class signal buried in noise.
fn table(n: u64, dim: usize, seed: u64) -> (BTreeMap<ItemId, AtomicEmbeddings>, BTreeMap<ItemId, usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..CLASSES).map(|_| (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect()).collect();
    let mut t = BTreeMap::new();
    let mut classes = BTreeMap::new();
    for i in 0..n {
        let c = i as usize % CLASSES;
        let mut noisy = || -> Vec<f64> { centers[c].iter().map(|m| m + rng.random_range(-1.0..1.0)).collect() };
        t.insert(
            ItemId(i),
            AtomicEmbeddings {
                semantic: noisy(),
                common: noisy(),
                efficient: noisy(),
            },
        );
        classes.insert(ItemId(i), c);
    }
    (t, classes)
}

/// Each page view shows items from two classes; only the first class is clicked.
fn page_views(n_items: u64, count: u64, seed: u64) -> Vec<PageView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = n_items / CLASSES as u64;
    (0..count)
        .map(|pv_id| {
            let a = rng.random_range(0..CLASSES as u64);
            let b = (a + rng.random_range(1..CLASSES as u64)) % CLASSES as u64;
            let pick = |rng: &mut ChaCha8Rng, c: u64| ItemId(rng.random_range(0..per_class) * CLASSES as u64 + c);
            let mut entries = Vec::new();
            for _ in 0..3 {
                let id = pick(&mut rng, a);
                if !entries.iter().any(|(e, _)| *e == id) {
                    entries.push((id, 1));
                }
            }
            for _ in 0..3 {
                let id = pick(&mut rng, b);
                if !entries.iter().any(|(e, _)| *e == id) {
                    entries.push((id, 0));
                }
            }
            PageView { pv_id, entries }
        })
        .collect()
}

fn gap(model: &FusionModel, t: &BTreeMap<ItemId, AtomicEmbeddings>, classes: &BTreeMap<ItemId, usize>) -> (f64, f64) {
    let fused = model.fuse_all(t).unwrap();
    let vecs: Vec<Vec<f64>> = fused.values().cloned().collect();
    let labels: Vec<usize> = fused.keys().map(|k| classes[k]).collect();
    intra_inter_distances(&vecs, &labels)
}

#[test]
fn triplet_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let v: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let expected = f64::max(0.0, 0.3 + dist(&v[0], &v[1]) - dist(&v[0], &v[2]));
        let got = triplet_loss(ArrayView1::from(&v[0]), ArrayView1::from(&v[1]), ArrayView1::from(&v[2]), 0.3);
        assert!((got - expected).abs() < 1e-12);
    }
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let (t, _) = table(16, 3, 1);
    let pvs = page_views(16, 6, 2);
    for normalize in [false, true] {
        let config = FusionConfig {
            output_dim: 4,
            hidden_dims: vec![5],
            margin: 2.0,
            cap_per_pv: 20,
            normalize,
        };
        let model = FusionModel::new(config, 3, 3).unwrap();
        let triplets = mine_triplets(&pvs, 20, 0);
        let inputs = TripletInputs::build(&triplets, &t).unwrap();
        let (loss, grads) = model.loss_and_grads(&model.store, &inputs).unwrap();
        assert!(loss > 0.0);
        let report = finite_diff_gradcheck(|s| model.loss_with(s, &inputs).unwrap(), &model.store, &grads, 1e-5);
        // The output bias cancels in every distance, so its gradient is exactly zero.
        let (rel, abs) = report.split_at_floor(1e-8);
        assert!(rel < 1e-4 && abs < 1e-9, "normalize={normalize}: rel {rel}, abs {abs}");
    }
}

#[test]
fn training_pulls_classes_together() {
    let (t, classes) = table(80, 6, 11);
    let pvs = page_views(80, 300, 12);
    let mut model = FusionModel::new(
        FusionConfig {
            output_dim: 8,
            hidden_dims: vec![16],
            margin: 0.5,
            ..FusionConfig::default()
        },
        6,
        13,
    )
    .unwrap();
    let (intra0, inter0) = gap(&model, &t, &classes);
    let log = train_metric(
        &mut model,
        &t,
        &pvs,
        &TrainConfig {
            lr: 0.01,
            batch_size: 32,
            epochs: 15,
            seed: 4,
            smoothing_window: 3,
        },
    )
    .unwrap();
    let (intra1, inter1) = gap(&model, &t, &classes);
    let (g0, g1) = (intra0 - inter0, intra1 - inter1);
    assert!(g0 - g1 >= 0.3 * g0.abs(), "gap {g0} -> {g1}");
    assert!(intra1 / inter1 < intra0 / inter0);
    assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
}

#[test]
fn training_is_deterministic_and_needs_triplets() {
    let (t, _) = table(20, 3, 1);
    let pvs = page_views(20, 20, 2);
    let cfg = TrainConfig {
        lr: 0.01,
        batch_size: 8,
        epochs: 2,
        seed: 9,
        smoothing_window: 3,
    };
    let run = || {
        let mut m = FusionModel::new(FusionConfig::default(), 3, 1).unwrap();
        train_metric(&mut m, &t, &pvs, &cfg).unwrap();
        m.store
    };
    assert_eq!(run(), run());

    let useless = vec![PageView {
        pv_id: 0,
        entries: vec![(ItemId(0), 1), (ItemId(1), 0)],
    }];
    let mut m = FusionModel::new(FusionConfig::default(), 3, 1).unwrap();
    assert!(matches!(train_metric(&mut m, &t, &useless, &cfg), Err(higen::Error::Config(_))));
}

#[test]
fn missing_atomic_embedding_is_reported() {
    let (t, _) = table(4, 3, 1);
    let pvs = vec![PageView {
        pv_id: 0,
        entries: vec![(ItemId(0), 1), (ItemId(1), 1), (ItemId(99), 0)],
    }];
    let err = TripletInputs::build(&mine_triplets(&pvs, 5, 0), &t).unwrap_err();
    assert!(err.to_string().contains("99"));
}

#[test]
fn checkpoint_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (t, _) = table(6, 3, 1);
    let model = FusionModel::new(FusionConfig::default(), 3, 1).unwrap();
    model.save(&dir.path().join("f.json")).unwrap();
    let back = FusionModel::load(&dir.path().join("f.json")).unwrap();
    assert_eq!(back.store, model.store);
    let fused = model.fuse_all(&t).unwrap();
    write_fusion_jsonl(&dir.path().join("f.jsonl"), &fused).unwrap();
    assert_eq!(read_fusion_jsonl(&dir.path().join("f.jsonl")).unwrap(), fused);
    assert_eq!(back.fuse_all(&t).unwrap(), fused);
}
