//! Fusion of the three atomic embeddings into one vector `I_a`, refined with
//! page-view triplet metric learning.
//!
//! Triplets come from a single page view: the anchor and positive share a
//! click label, the negative has the other label. The loss is the standard
//! hinge `max(0, m + ‖a − p‖ − ‖a − n‖)` on Euclidean distance. Atomic
//! embeddings are frozen; only the fusion MLP trains.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl, ItemId, PageView};
use crate::error::{Error, Result};
use crate::nn::loss::{euclidean, l2_normalize, l2_normalize_backward};
use crate::nn::{load_checkpoint, save_checkpoint, Activation, Adam, DenseNet, Grads, ParamStore, Tensor2};
use crate::representation::{AtomicEmbeddings, TrainLog};
use crate::train::{epoch_batches, warn_on_trend, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Output dimension `d` of `I_a`.
    pub output_dim: usize,
    /// Hidden layer widths between the concatenated input and the output.
    pub hidden_dims: Vec<usize>,
    /// Triplet margin `m`.
    pub margin: f64,
    /// At most this many triplets are sampled from one page view.
    pub cap_per_pv: usize,
    /// Measure distances between L2-normalized fusion vectors.
    #[serde(default)]
    pub normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            output_dim: 64,
            hidden_dims: vec![64],
            margin: 0.1,
            cap_per_pv: 20,
            normalize: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("fusion dims must be >= 1".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.cap_per_pv == 0 {
            return Err(Error::Config("cap_per_pv must be >= 1".into()));
        }
        Ok(())
    }

    fn activations(&self) -> Vec<Activation> {
        let mut acts = vec![Activation::Tanh; self.hidden_dims.len()];
        acts.push(Activation::Identity);
        acts
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub atomic_dim: usize,
    pub store: ParamStore,
    net: DenseNet,
}

#[derive(Serialize, Deserialize)]
struct FusionMeta {
    config: FusionConfig,
    atomic_dim: usize,
}

const CKPT_KIND: &str = "fusion";

/// `[common | efficient | semantic]`, the fixed fusion input order.
pub fn fusion_input(atomic: &AtomicEmbeddings) -> Vec<f64> {
    let mut v = Vec::with_capacity(atomic.common.len() * 3);
    v.extend(&atomic.common);
    v.extend(&atomic.efficient);
    v.extend(&atomic.semantic);
    v
}

impl FusionModel {
    pub fn new(config: FusionConfig, atomic_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut sizes = vec![3 * atomic_dim];
        sizes.extend(&config.hidden_dims);
        sizes.push(config.output_dim);
        let net = DenseNet::new(&mut store, "fusion", &sizes, &config.activations(), &mut rng);
        Ok(Self {
            config,
            atomic_dim,
            store,
            net,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = FusionMeta {
            config: self.config.clone(),
            atomic_dim: self.atomic_dim,
        };
        save_checkpoint(path, CKPT_KIND, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store): (FusionMeta, _) = load_checkpoint(path, CKPT_KIND)?;
        let net = DenseNet::attach(&store, "fusion", &meta.config.activations())?;
        Ok(Self {
            config: meta.config,
            atomic_dim: meta.atomic_dim,
            store,
            net,
        })
    }

    /// `I_a = MLP(concat(x_ic, x_ie, x_is))`.
    pub fn fuse(&self, atomic: &AtomicEmbeddings) -> Result<Vec<f64>> {
        let d = self.atomic_dim;
        let dims = (atomic.common.len(), atomic.efficient.len(), atomic.semantic.len());
        if dims != (d, d, d) {
            return Err(Error::dim("fuse", format!("({d}, {d}, {d})"), format!("{dims:?}")));
        }
        let x = Tensor2::from_shape_vec((1, 3 * d), fusion_input(atomic)).expect("length checked");
        Ok(self.net.forward(&self.store, &x)?.row(0).to_vec())
    }

    pub fn fuse_all(&self, table: &BTreeMap<ItemId, AtomicEmbeddings>) -> Result<BTreeMap<ItemId, Vec<f64>>> {
        table.iter().map(|(id, a)| Ok((*id, self.fuse(a)?))).collect()
    }

    /// Mean triplet loss over `triplets` using parameters `store`.
    pub fn loss_with(&self, store: &ParamStore, inputs: &TripletInputs) -> Result<f64> {
        let out = self.net.forward(store, &inputs.matrix)?;
        Ok(inputs
            .triplets
            .iter()
            .map(|&(a, p, n)| {
                let (va, vp, vn) = self.project(out.row(a), out.row(p), out.row(n));
                triplet_loss(va.view(), vp.view(), vn.view(), self.config.margin)
            })
            .sum::<f64>()
            / inputs.triplets.len().max(1) as f64)
    }

    pub fn loss_and_grads(&self, store: &ParamStore, inputs: &TripletInputs) -> Result<(f64, Grads)> {
        let cache = self.net.forward_cached(store, &inputs.matrix)?;
        let out = cache.output();
        let mut grad_out = Tensor2::zeros(out.raw_dim());
        let scale = 1.0 / inputs.triplets.len().max(1) as f64;
        let mut loss = 0.0;
        for &(a, p, n) in &inputs.triplets {
            let rows = [a, p, n];
            let normalized: Vec<Option<(Array1<f64>, f64)>> = rows
                .iter()
                .map(|&r| {
                    if self.config.normalize {
                        l2_normalize(out.row(r))
                    } else {
                        None
                    }
                })
                .collect();
            let vecs: Vec<Array1<f64>> = rows
                .iter()
                .zip(&normalized)
                .map(|(&r, nrm)| nrm.as_ref().map_or_else(|| out.row(r).to_owned(), |(u, _)| u.clone()))
                .collect();
            let l = triplet_loss(vecs[0].view(), vecs[1].view(), vecs[2].view(), self.config.margin);
            loss += l;
            if l <= 0.0 {
                continue;
            }
            let (ga, gp, gn) = triplet_loss_grad(vecs[0].view(), vecs[1].view(), vecs[2].view());
            for ((&r, g), nrm) in rows.iter().zip([ga, gp, gn]).zip(&normalized) {
                let g = match nrm {
                    Some((u, norm)) => l2_normalize_backward(u.view(), *norm, g.view()),
                    None => g,
                };
                let mut dst = grad_out.row_mut(r);
                dst.scaled_add(scale, &g);
            }
        }
        let mut grads = store.zeros_like();
        self.net.backward(store, &cache, &grad_out, &mut grads);
        Ok((loss * scale, grads))
    }

    fn project(&self, a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let f = |v: ArrayView1<f64>| {
            if self.config.normalize {
                l2_normalize(v).map_or_else(|| v.to_owned(), |(u, _)| u)
            } else {
                v.to_owned()
            }
        };
        (f(a), f(p), f(n))
    }
}

/// Anchor, positive and negative drawn from one page view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub pv_id: u64,
    pub anchor: ItemId,
    pub positive: ItemId,
    pub negative: ItemId,
}

/// Every valid triplet of a page view, anchors in entry order.
pub fn enumerate_triplets(pv: &PageView) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (j, &(anchor, ya)) in pv.entries.iter().enumerate() {
        for (k, &(positive, yp)) in pv.entries.iter().enumerate() {
            if k == j || yp != ya {
                continue;
            }
            for &(negative, yn) in &pv.entries {
                if yn != ya {
                    out.push(Triplet {
                        pv_id: pv.pv_id,
                        anchor,
                        positive,
                        negative,
                    });
                }
            }
        }
    }
    out
}

/// Samples up to `cap_per_pv` triplets per page view, uniformly without replacement.
/// Each page view draws from its own stream derived from `seed` and its id.
pub fn mine_triplets(pvs: &[PageView], cap_per_pv: usize, seed: u64) -> Vec<Triplet> {
    assert!(cap_per_pv >= 1, "cap_per_pv must be >= 1");
    let mut out = Vec::new();
    for pv in pvs {
        let all = enumerate_triplets(pv);
        if all.len() <= cap_per_pv {
            out.extend(all);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pv.pv_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut picked = sample(&mut rng, all.len(), cap_per_pv).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| all[i]));
    }
    out
}

/// `max(0, m + ‖a − p‖ − ‖a − n‖)`.
pub fn triplet_loss(a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>, margin: f64) -> f64 {
    (margin + euclidean(a, p) - euclidean(a, n)).max(0.0)
}

/// Gradient of the active hinge with respect to (a, p, n). Zero-length
/// difference vectors contribute a zero subgradient.
fn triplet_loss_grad(a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let unit = |x: ArrayView1<f64>, y: ArrayView1<f64>| {
        let d = &x - &y;
        let norm = d.dot(&d).sqrt();
        if norm > 0.0 {
            d / norm
        } else {
            Array1::zeros(x.len())
        }
    };
    let ap = unit(a, p);
    let an = unit(a, n);
    (&ap - &an, -ap, an)
}

/// Stacked unique item inputs plus row-index triplets, ready for a forward pass.
#[derive(Clone, Debug)]
pub struct TripletInputs {
    pub matrix: Tensor2,
    pub triplets: Vec<(usize, usize, usize)>,
}

impl TripletInputs {
    pub fn build(triplets: &[Triplet], table: &BTreeMap<ItemId, AtomicEmbeddings>) -> Result<Self> {
        let mut rows: BTreeMap<ItemId, usize> = BTreeMap::new();
        for t in triplets {
            for id in [t.anchor, t.positive, t.negative] {
                let next = rows.len();
                rows.entry(id).or_insert(next);
            }
        }
        let mut ordered: Vec<(ItemId, usize)> = rows.iter().map(|(k, v)| (*k, *v)).collect();
        ordered.sort_by_key(|&(_, r)| r);
        let width = table.values().next().map_or(0, |a| 3 * a.common.len());
        let mut matrix = Tensor2::zeros((ordered.len(), width));
        for (id, r) in &ordered {
            let a = table
                .get(id)
                .ok_or_else(|| Error::Lookup(format!("no atomic embedding for item {id}")))?;
            matrix.row_mut(*r).assign(&Array1::from(fusion_input(a)));
        }
        Ok(Self {
            matrix,
            triplets: triplets
                .iter()
                .map(|t| (rows[&t.anchor], rows[&t.positive], rows[&t.negative]))
                .collect(),
        })
    }
}

/// Trains the fusion MLP on triplets mined from `pvs`.
pub fn train_metric(
    model: &mut FusionModel,
    table: &BTreeMap<ItemId, AtomicEmbeddings>,
    pvs: &[PageView],
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate("metric")?;
    let triplets = mine_triplets(pvs, model.config.cap_per_pv, config.seed);
    if triplets.is_empty() {
        return Err(Error::Config(
            "no page view contains both clicked and unclicked items with a distinct positive; nothing to train".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(&model.store, config.lr);
    let mut last_good = model.store.clone();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for (step, idx) in epoch_batches(triplets.len(), config.batch_size, &mut rng).iter().enumerate() {
            let chunk: Vec<Triplet> = idx.iter().map(|&i| triplets[i]).collect();
            let inputs = TripletInputs::build(&chunk, table)?;
            let outcome = model.loss_and_grads(&model.store, &inputs).and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { stage: "train-metric", epoch, step });
                }
                adam.step(&mut model.store, &grads).map(|_| loss)
            });
            match outcome {
                Ok(loss) => total += loss * chunk.len() as f64,
                Err(e) => {
                    model.store = last_good;
                    return Err(e);
                }
            }
        }
        let mean = total / triplets.len() as f64;
        log::debug!("train-metric epoch {epoch}: loss {mean:.6}");
        log.epoch_losses.push(mean);
        last_good.copy_from(&model.store)?;
    }
    warn_on_trend("train-metric", &log.epoch_losses, config.smoothing_window);
    Ok(log)
}

/// Mean pairwise distance within classes and across classes.
pub fn intra_inter_distances(vectors: &[Vec<f64>], classes: &[usize]) -> (f64, f64) {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d = euclidean(ArrayView1::from(&vectors[i]), ArrayView1::from(&vectors[j]));
            if classes[i] == classes[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}

#[derive(Serialize, Deserialize)]
struct FusionRecord {
    item_id: ItemId,
    fusion: Vec<f64>,
}

pub fn write_fusion_jsonl(path: &Path, table: &BTreeMap<ItemId, Vec<f64>>) -> Result<()> {
    let records: Vec<FusionRecord> = table
        .iter()
        .map(|(id, v)| FusionRecord {
            item_id: *id,
            fusion: v.clone(),
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn read_fusion_jsonl(path: &Path) -> Result<BTreeMap<ItemId, Vec<f64>>> {
    let records: Vec<FusionRecord> = read_jsonl(path)?;
    Ok(records.into_iter().map(|r| (r.item_id, r.fusion)).collect())
}

/// Stacks fusion vectors in id order (for batch distance computations).
pub fn stack(table: &BTreeMap<ItemId, Vec<f64>>) -> Tensor2 {
    let d = table.values().next().map_or(0, Vec::len);
    let mut m = Tensor2::zeros((table.len(), d));
    for (mut row, v) in m.axis_iter_mut(Axis(0)).zip(table.values()) {
        row.assign(&ArrayView1::from(v));
    }
    m
}
