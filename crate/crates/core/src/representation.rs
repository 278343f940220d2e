//! Two-tower atomic embedding model.
//!
//! The user tower concatenates the user embedding with two attention blocks
//! (context self-attention and query→context attention, each flattened
//! sequence-major) and feeds them through an MLP to get `U`. The item side
//! produces three atomic embeddings per item:
//!
//! * semantic `x_is` — projection of the item's semantic features,
//! * common `x_ic` — a learned per-item id embedding,
//! * efficient `x_ie` — projection of the standardized efficiency statistics.
//!
//! The relevance head sees `[x_is | x_ic]`, the click head `[x_ie | x_ic]`;
//! both share the same `x_ic` row. Each head's output is compared with `U` by
//! cosine similarity and mapped to a probability with `sigmoid(cos / τ)`.
//! Training minimizes `BCE(y_r, ŷ_r) + w_c · BCE(y_c, ŷ_c)` averaged over the batch.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, DatasetRow, ItemId};
use crate::error::{Error, Result};
use crate::features::{EncodedContext, FeatureVocab};
use crate::nn::loss::{bce_logit_grad, l2_normalize, l2_normalize_backward};
use crate::nn::{
    attention_backward, attention_forward, binary_cross_entropy, load_checkpoint, save_checkpoint, sigmoid, Activation,
    Adam, DenseNet, Grads, ParamId, ParamStore, Tensor2,
};
use crate::train::{epoch_batches, warn_on_trend, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTowerConfig {
    /// `d_u`
    pub user_dim: usize,
    /// `d_k`, per-token width of query and context embeddings.
    pub key_dim: usize,
    /// `d_e`, width of `U` and of both item-head outputs.
    pub tower_dim: usize,
    /// Width shared by the three atomic embeddings.
    pub atomic_dim: usize,
    pub hidden_dim: usize,
    /// Sigmoid temperature `τ` applied to the cosine.
    pub temperature: f64,
    /// Click-task weight `w_c`.
    pub click_weight: f64,
}

impl Default for TwoTowerConfig {
    fn default() -> Self {
        Self {
            user_dim: 16,
            key_dim: 16,
            tower_dim: 32,
            atomic_dim: 32,
            hidden_dim: 32,
            temperature: 0.2,
            click_weight: 1.0,
        }
    }
}

impl TwoTowerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.user_dim, self.key_dim, self.tower_dim, self.atomic_dim, self.hidden_dim];
        if dims.contains(&0) {
            return Err(Error::Config("embedding dims must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.click_weight >= 0.0 && self.click_weight.is_finite()) {
            return Err(Error::Config(format!("click_weight must be >= 0, got {}", self.click_weight)));
        }
        Ok(())
    }
}

/// The three per-item atomic embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicEmbeddings {
    pub semantic: Vec<f64>,
    pub common: Vec<f64>,
    pub efficient: Vec<f64>,
}

/// Row-aligned atomic embeddings for a batch of items.
#[derive(Clone, Debug)]
pub struct AtomicBatch {
    pub semantic: Tensor2,
    pub common: Tensor2,
    pub efficient: Tensor2,
}

/// Pre-embedding inputs of a training batch.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub contexts: Vec<EncodedContext>,
    pub items: Vec<usize>,
    pub semantic: Tensor2,
    /// Standardized efficiency statistics.
    pub efficiency: Tensor2,
    pub relevance: Vec<f64>,
    pub click: Vec<f64>,
}

impl FeatureBatch {
    pub fn from_rows(rows: &[&DatasetRow], catalog: &Catalog, vocab: &FeatureVocab) -> Result<Self> {
        let b = rows.len();
        let (sd, ed) = (catalog.semantic_dim(), catalog.efficiency_dim());
        let mut semantic = Tensor2::zeros((b, sd));
        let mut efficiency = Tensor2::zeros((b, ed));
        let mut items = Vec::with_capacity(b);
        for (i, r) in rows.iter().enumerate() {
            let item = catalog
                .get(r.target_item)
                .ok_or_else(|| Error::Lookup(format!("item {} not in catalog", r.target_item)))?;
            items.push(vocab.item_index(r.target_item)?);
            semantic.row_mut(i).assign(&Array1::from(item.semantic.clone()));
            efficiency
                .row_mut(i)
                .assign(&Array1::from(vocab.standardize_efficiency(&item.efficiency)));
        }
        Ok(Self {
            contexts: rows.iter().map(|r| vocab.encode_row(r)).collect(),
            items,
            semantic,
            efficiency,
            relevance: rows.iter().map(|r| r.relevance as f64).collect(),
            click: rows.iter().map(|r| r.click as f64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            contexts: idx.iter().map(|&i| self.contexts[i].clone()).collect(),
            items: idx.iter().map(|&i| self.items[i]).collect(),
            semantic: self.semantic.select(Axis(0), idx),
            efficiency: self.efficiency.select(Axis(0), idx),
            relevance: idx.iter().map(|&i| self.relevance[i]).collect(),
            click: idx.iter().map(|&i| self.click[i]).collect(),
        }
    }
}

/// Embedded user-side inputs: `x_u` is `B × d_u`; each `x_q[b]` is
/// `d_q × d_k` and each `x_c[b]` is `d_c × d_k`.
#[derive(Clone, Debug)]
pub struct UserInputs {
    pub x_u: Tensor2,
    pub x_q: Vec<Tensor2>,
    pub x_c: Vec<Tensor2>,
}

#[derive(Clone, Debug)]
pub struct TwoTowerModel {
    pub config: TwoTowerConfig,
    pub vocab: FeatureVocab,
    pub store: ParamStore,
    user_emb: ParamId,
    token_emb: ParamId,
    context_emb: ParamId,
    item_common: ParamId,
    semantic_proj: DenseNet,
    efficiency_proj: DenseNet,
    user_mlp: DenseNet,
    relevance_head: DenseNet,
    click_head: DenseNet,
}

#[derive(Serialize, Deserialize)]
struct TwoTowerMeta {
    config: TwoTowerConfig,
    vocab: FeatureVocab,
}

const CKPT_KIND: &str = "two-tower";
const PROJ_ACT: [Activation; 1] = [Activation::Tanh];
const MLP_ACT: [Activation; 2] = [Activation::Tanh, Activation::Identity];

pub(crate) fn gather_rows(table: &Tensor2, idx: &[usize]) -> Tensor2 {
    table.select(Axis(0), idx)
}

pub(crate) fn scatter_add_rows(grad: &mut Tensor2, idx: &[usize], rows: &Tensor2) {
    for (r, &i) in idx.iter().enumerate() {
        let mut dst = grad.row_mut(i);
        dst += &rows.row(r);
    }
}

fn hconcat(parts: &[&Tensor2]) -> Tensor2 {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("row counts agree")
}

fn flatten(t: &Tensor2) -> Array1<f64> {
    Array1::from_iter(t.iter().copied())
}

struct ForwardState {
    inputs: UserInputs,
    user_cache: crate::nn::DenseCache,
    sem_cache: crate::nn::DenseCache,
    eff_cache: crate::nn::DenseCache,
    rel_cache: crate::nn::DenseCache,
    click_cache: crate::nn::DenseCache,
}

impl TwoTowerModel {
    pub fn new(
        config: TwoTowerConfig,
        vocab: FeatureVocab,
        semantic_dim: usize,
        efficiency_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let user_emb = store.add_uniform("user_emb", vocab.num_users(), c.user_dim, &mut rng);
        let token_emb = store.add_uniform("token_emb", vocab.num_tokens(), c.key_dim, &mut rng);
        let context_emb = store.add_uniform("context_emb", vocab.num_items(), c.key_dim, &mut rng);
        let item_common = store.add_uniform("item_common", vocab.num_items(), c.atomic_dim, &mut rng);
        let semantic_proj = DenseNet::new(&mut store, "semantic_proj", &[semantic_dim, c.atomic_dim], &PROJ_ACT, &mut rng);
        let efficiency_proj =
            DenseNet::new(&mut store, "efficiency_proj", &[efficiency_dim, c.atomic_dim], &PROJ_ACT, &mut rng);
        let user_in = c.user_dim + (vocab.context_len + vocab.query_len) * c.key_dim;
        let user_mlp = DenseNet::new(&mut store, "user_mlp", &[user_in, c.hidden_dim, c.tower_dim], &MLP_ACT, &mut rng);
        let head = [2 * c.atomic_dim, c.hidden_dim, c.tower_dim];
        let relevance_head = DenseNet::new(&mut store, "relevance_head", &head, &MLP_ACT, &mut rng);
        let click_head = DenseNet::new(&mut store, "click_head", &head, &MLP_ACT, &mut rng);
        Ok(Self {
            config,
            vocab,
            store,
            user_emb,
            token_emb,
            context_emb,
            item_common,
            semantic_proj,
            efficiency_proj,
            user_mlp,
            relevance_head,
            click_head,
        })
    }

    fn attach(config: TwoTowerConfig, vocab: FeatureVocab, store: ParamStore) -> Result<Self> {
        let find = |n: &str| store.find(n).ok_or_else(|| Error::Lookup(format!("missing parameter {n}")));
        Ok(Self {
            user_emb: find("user_emb")?,
            token_emb: find("token_emb")?,
            context_emb: find("context_emb")?,
            item_common: find("item_common")?,
            semantic_proj: DenseNet::attach(&store, "semantic_proj", &PROJ_ACT)?,
            efficiency_proj: DenseNet::attach(&store, "efficiency_proj", &PROJ_ACT)?,
            user_mlp: DenseNet::attach(&store, "user_mlp", &MLP_ACT)?,
            relevance_head: DenseNet::attach(&store, "relevance_head", &MLP_ACT)?,
            click_head: DenseNet::attach(&store, "click_head", &MLP_ACT)?,
            config,
            vocab,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TwoTowerMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        save_checkpoint(path, CKPT_KIND, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store): (TwoTowerMeta, _) = load_checkpoint(path, CKPT_KIND)?;
        Self::attach(meta.config, meta.vocab, store)
    }

    pub fn user_mlp(&self) -> &DenseNet {
        &self.user_mlp
    }

    pub fn relevance_head(&self) -> &DenseNet {
        &self.relevance_head
    }

    pub fn click_head(&self) -> &DenseNet {
        &self.click_head
    }

    /// Looks up the embedding tables for a batch of encoded contexts.
    pub fn embed_user_inputs(&self, contexts: &[EncodedContext]) -> UserInputs {
        self.embed_with(&self.store, contexts)
    }

    fn embed_with(&self, store: &ParamStore, contexts: &[EncodedContext]) -> UserInputs {
        let users: Vec<usize> = contexts.iter().map(|c| c.user).collect();
        UserInputs {
            x_u: gather_rows(store.get(self.user_emb), &users),
            x_q: contexts.iter().map(|c| gather_rows(store.get(self.token_emb), &c.query)).collect(),
            x_c: contexts.iter().map(|c| gather_rows(store.get(self.context_emb), &c.context)).collect(),
        }
    }

    /// `U = MLP(concat(x_u, Z(x_c,x_c,x_c), Z(x_q,x_c,x_c)))`, `B × d_e`.
    pub fn user_tower(&self, x_u: &Tensor2, x_q: &[Tensor2], x_c: &[Tensor2]) -> Result<Tensor2> {
        let inputs = UserInputs {
            x_u: x_u.clone(),
            x_q: x_q.to_vec(),
            x_c: x_c.to_vec(),
        };
        let input = self.user_tower_input(&inputs)?;
        self.user_mlp.forward(&self.store, &input)
    }

    fn user_tower_input(&self, inputs: &UserInputs) -> Result<Tensor2> {
        let b = inputs.x_u.nrows();
        if inputs.x_q.len() != b || inputs.x_c.len() != b {
            return Err(Error::dim("user_tower: batch", b, format!("{}/{}", inputs.x_q.len(), inputs.x_c.len())));
        }
        let (dq, dc, dk) = (self.vocab.query_len, self.vocab.context_len, self.config.key_dim);
        if inputs.x_u.ncols() != self.config.user_dim {
            return Err(Error::dim("user_tower: x_u", self.config.user_dim, inputs.x_u.ncols()));
        }
        let width = self.config.user_dim + (dc + dq) * dk;
        let mut input = Tensor2::zeros((b, width));
        for i in 0..b {
            let (xq, xc) = (&inputs.x_q[i], &inputs.x_c[i]);
            if xq.dim() != (dq, dk) || xc.dim() != (dc, dk) {
                return Err(Error::dim("user_tower: sequence", format!("{dq}x{dk} / {dc}x{dk}"), format!("{:?} / {:?}", xq.dim(), xc.dim())));
            }
            let sa = attention_forward(xc, xc, xc, dk)?;
            let qa = attention_forward(xq, xc, xc, dk)?;
            let mut row = input.row_mut(i);
            row.slice_mut(s![..self.config.user_dim]).assign(&inputs.x_u.row(i));
            let o = self.config.user_dim;
            row.slice_mut(s![o..o + dc * dk]).assign(&flatten(&sa.output));
            row.slice_mut(s![o + dc * dk..]).assign(&flatten(&qa.output));
        }
        Ok(input)
    }

    /// Atomic embeddings for a batch of item indices with their raw side features.
    fn atomic_with(
        &self,
        store: &ParamStore,
        items: &[usize],
        semantic: &Tensor2,
        efficiency: &Tensor2,
    ) -> Result<AtomicBatch> {
        Ok(AtomicBatch {
            semantic: self.semantic_proj.forward(store, semantic)?,
            common: gather_rows(store.get(self.item_common), items),
            efficient: self.efficiency_proj.forward(store, efficiency)?,
        })
    }

    /// Relevance and click probabilities: `sigmoid(cos(U, head) / τ)`.
    pub fn item_heads(&self, atomic: &AtomicBatch, u: &Tensor2) -> Result<(Vec<f64>, Vec<f64>)> {
        let r = self
            .relevance_head
            .forward(&self.store, &hconcat(&[&atomic.semantic, &atomic.common]))?;
        let c = self
            .click_head
            .forward(&self.store, &hconcat(&[&atomic.efficient, &atomic.common]))?;
        let cos_r = cosines(u, &r, "relevance")?;
        let cos_c = cosines(u, &c, "click")?;
        let tau = self.config.temperature;
        Ok((
            cos_r.iter().map(|c| sigmoid(c / tau)).collect(),
            cos_c.iter().map(|c| sigmoid(c / tau)).collect(),
        ))
    }

    pub fn predict(&self, batch: &FeatureBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        let inputs = self.embed_with(&self.store, &batch.contexts);
        let u = self.user_tower(&inputs.x_u, &inputs.x_q, &inputs.x_c)?;
        let atomic = self.atomic_with(&self.store, &batch.items, &batch.semantic, &batch.efficiency)?;
        self.item_heads(&atomic, &u)
    }

    pub fn loss(&self, batch: &FeatureBatch) -> Result<f64> {
        self.loss_with(&self.store, batch)
    }

    pub fn loss_with(&self, store: &ParamStore, batch: &FeatureBatch) -> Result<f64> {
        let st = self.forward_state(store, batch)?;
        let (pr, pc) = self.probabilities(&st)?;
        Ok(embed_loss(&pr, &pc, &batch.relevance, &batch.click, self.config.click_weight))
    }

    fn forward_state(&self, store: &ParamStore, batch: &FeatureBatch) -> Result<ForwardState> {
        let inputs = self.embed_with(store, &batch.contexts);
        // attention weights are recomputed in backward from the cached inputs
        let user_in = self.user_tower_input(&inputs)?;
        let user_cache = self.user_mlp.forward_cached(store, &user_in)?;
        let sem_cache = self.semantic_proj.forward_cached(store, &batch.semantic)?;
        let eff_cache = self.efficiency_proj.forward_cached(store, &batch.efficiency)?;
        let x_ic = gather_rows(store.get(self.item_common), &batch.items);
        let rel_cache = self
            .relevance_head
            .forward_cached(store, &hconcat(&[sem_cache.output(), &x_ic]))?;
        let click_cache = self.click_head.forward_cached(store, &hconcat(&[eff_cache.output(), &x_ic]))?;
        Ok(ForwardState {
            inputs,
            user_cache,
            sem_cache,
            eff_cache,
            rel_cache,
            click_cache,
        })
    }

    fn probabilities(&self, st: &ForwardState) -> Result<(Vec<f64>, Vec<f64>)> {
        let u = st.user_cache.output();
        let tau = self.config.temperature;
        let cr = cosines(u, st.rel_cache.output(), "relevance")?;
        let cc = cosines(u, st.click_cache.output(), "click")?;
        Ok((
            cr.iter().map(|c| sigmoid(c / tau)).collect(),
            cc.iter().map(|c| sigmoid(c / tau)).collect(),
        ))
    }

    /// Mean-batch loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, store: &ParamStore, batch: &FeatureBatch) -> Result<(f64, Grads)> {
        let st = self.forward_state(store, batch)?;
        let b = batch.len();
        let (tau, wc) = (self.config.temperature, self.config.click_weight);
        let u = st.user_cache.output().clone();
        let r = st.rel_cache.output().clone();
        let c = st.click_cache.output().clone();
        let mut grad_u = Tensor2::zeros(u.raw_dim());
        let mut grad_r = Tensor2::zeros(r.raw_dim());
        let mut grad_c = Tensor2::zeros(c.raw_dim());
        let mut loss = 0.0;
        for i in 0..b {
            let (nu, norm_u) = l2_normalize(u.row(i)).ok_or(Error::Normalization { tower: "user" })?;
            let (nr, norm_r) = l2_normalize(r.row(i)).ok_or(Error::Normalization { tower: "relevance" })?;
            let (nc, norm_c) = l2_normalize(c.row(i)).ok_or(Error::Normalization { tower: "click" })?;
            let pr = sigmoid(nu.dot(&nr) / tau);
            let pc = sigmoid(nu.dot(&nc) / tau);
            loss += binary_cross_entropy(pr, batch.relevance[i]) + wc * binary_cross_entropy(pc, batch.click[i]);
            let dcos_r = bce_logit_grad(pr, batch.relevance[i]) / tau / b as f64;
            let dcos_c = wc * bce_logit_grad(pc, batch.click[i]) / tau / b as f64;
            let d_nu = &nr * dcos_r + &nc * dcos_c;
            grad_u
                .row_mut(i)
                .assign(&l2_normalize_backward(nu.view(), norm_u, d_nu.view()));
            grad_r
                .row_mut(i)
                .assign(&l2_normalize_backward(nr.view(), norm_r, (&nu * dcos_r).view()));
            grad_c
                .row_mut(i)
                .assign(&l2_normalize_backward(nc.view(), norm_c, (&nu * dcos_c).view()));
        }
        loss /= b as f64;

        let mut grads = store.zeros_like();
        let da = self.config.atomic_dim;
        let d_rin = self.relevance_head.backward(store, &st.rel_cache, &grad_r, &mut grads);
        let d_cin = self.click_head.backward(store, &st.click_cache, &grad_c, &mut grads);
        let d_sem = d_rin.slice(s![.., ..da]).to_owned();
        let d_eff = d_cin.slice(s![.., ..da]).to_owned();
        let d_common = &d_rin.slice(s![.., da..]) + &d_cin.slice(s![.., da..]);
        self.semantic_proj.backward(store, &st.sem_cache, &d_sem, &mut grads);
        self.efficiency_proj.backward(store, &st.eff_cache, &d_eff, &mut grads);
        scatter_add_rows(grads.get_mut(self.item_common), &batch.items, &d_common);

        let d_user_in = self.user_mlp.backward(store, &st.user_cache, &grad_u, &mut grads);
        self.user_side_backward(&st, batch, &d_user_in, &mut grads)?;
        Ok((loss, grads))
    }

    fn user_side_backward(
        &self,
        st: &ForwardState,
        batch: &FeatureBatch,
        d_input: &Tensor2,
        grads: &mut Grads,
    ) -> Result<()> {
        let (dq, dc, dk, du) = (self.vocab.query_len, self.vocab.context_len, self.config.key_dim, self.config.user_dim);
        let users: Vec<usize> = batch.contexts.iter().map(|c| c.user).collect();
        scatter_add_rows(grads.get_mut(self.user_emb), &users, &d_input.slice(s![.., ..du]).to_owned());
        for (i, ctx) in batch.contexts.iter().enumerate() {
            let (xq, xc) = (&st.inputs.x_q[i], &st.inputs.x_c[i]);
            let d_self = d_input
                .slice(s![i, du..du + dc * dk])
                .to_owned()
                .into_shape_with_order((dc, dk))
                .expect("contiguous");
            let d_query = d_input
                .slice(s![i, du + dc * dk..])
                .to_owned()
                .into_shape_with_order((dq, dk))
                .expect("contiguous");
            let sa = attention_forward(xc, xc, xc, dk)?;
            let qa = attention_forward(xq, xc, xc, dk)?;
            let gs = attention_backward(xc, xc, xc, &sa.weights, &d_self, dk);
            let gq = attention_backward(xq, xc, xc, &qa.weights, &d_query, dk);
            let d_xc = gs.q + gs.k + gs.v + gq.k + gq.v;
            scatter_add_rows(grads.get_mut(self.context_emb), &ctx.context, &d_xc);
            scatter_add_rows(grads.get_mut(self.token_emb), &ctx.query, &gq.q);
        }
        Ok(())
    }

    /// Atomic embeddings of one catalog item.
    pub fn atomic_for(&self, catalog: &Catalog, item: ItemId) -> Result<AtomicEmbeddings> {
        let it = catalog
            .get(item)
            .ok_or_else(|| Error::Lookup(format!("item {item} not in catalog")))?;
        let idx = self.vocab.item_index(item)?;
        let sem = Tensor2::from_shape_vec((1, it.semantic.len()), it.semantic.clone())
            .map_err(|e| Error::dim("semantic features", self.semantic_proj.input_dim(), e))?;
        let eff_raw = self.vocab.standardize_efficiency(&it.efficiency);
        let eff = Tensor2::from_shape_vec((1, eff_raw.len()), eff_raw)
            .map_err(|e| Error::dim("efficiency features", self.efficiency_proj.input_dim(), e))?;
        let a = self.atomic_with(&self.store, &[idx], &sem, &eff)?;
        Ok(AtomicEmbeddings {
            semantic: a.semantic.row(0).to_vec(),
            common: a.common.row(0).to_vec(),
            efficient: a.efficient.row(0).to_vec(),
        })
    }
}

fn cosines(u: &Tensor2, v: &Tensor2, tower: &'static str) -> Result<Vec<f64>> {
    if u.dim() != v.dim() {
        return Err(Error::dim("item_heads", format!("{:?}", u.dim()), format!("{:?}", v.dim())));
    }
    (0..u.nrows())
        .map(|i| {
            let (nu, _) = l2_normalize(u.row(i)).ok_or(Error::Normalization { tower: "user" })?;
            let (nv, _) = l2_normalize(v.row(i)).ok_or(Error::Normalization { tower })?;
            Ok(nu.dot(&nv))
        })
        .collect()
}

/// `mean_b [BCE(y_r, ŷ_r) + w_c · BCE(y_c, ŷ_c)]`.
pub fn embed_loss(pred_r: &[f64], pred_c: &[f64], y_r: &[f64], y_c: &[f64], w_c: f64) -> f64 {
    let n = pred_r.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| binary_cross_entropy(pred_r[i], y_r[i]) + w_c * binary_cross_entropy(pred_c[i], y_c[i]))
        .sum();
    total / n as f64
}

/// Per-epoch mean training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Trains `model` in place. On a non-finite loss the parameters are rolled back
/// to the end of the last completed epoch and an error is returned.
pub fn train_embedding(model: &mut TwoTowerModel, data: &FeatureBatch, config: &TrainConfig) -> Result<TrainLog> {
    config.validate("embed")?;
    if data.is_empty() {
        return Err(Error::Data("embedding training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.store, config.lr);
    let mut last_good = model.store.clone();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), config.batch_size, &mut rng);
        for (step, idx) in batches.iter().enumerate() {
            let batch = data.select(idx);
            let outcome = model
                .loss_and_grads(&model.store, &batch)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss { stage: "train-embed", epoch, step });
                    }
                    adam.step(&mut model.store, &grads).map(|_| loss)
                });
            match outcome {
                Ok(loss) => total += loss * idx.len() as f64,
                Err(e) => {
                    model.store = last_good;
                    return Err(e);
                }
            }
        }
        let mean = total / data.len() as f64;
        log::debug!("train-embed epoch {epoch}: loss {mean:.6}");
        log.epoch_losses.push(mean);
        last_good.copy_from(&model.store)?;
    }
    warn_on_trend("train-embed", &log.epoch_losses, config.smoothing_window);
    Ok(log)
}

/// One record per catalog item, keyed by id.
pub fn export_atomic_embeddings(model: &TwoTowerModel, catalog: &Catalog) -> Result<BTreeMap<ItemId, AtomicEmbeddings>> {
    catalog
        .items()
        .iter()
        .map(|it| Ok((it.item_id, model.atomic_for(catalog, it.item_id)?)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct AtomicRecord {
    item_id: ItemId,
    semantic: Vec<f64>,
    common: Vec<f64>,
    efficient: Vec<f64>,
}

pub fn write_atomic_jsonl(path: &Path, table: &BTreeMap<ItemId, AtomicEmbeddings>) -> Result<()> {
    let records: Vec<AtomicRecord> = table
        .iter()
        .map(|(id, a)| AtomicRecord {
            item_id: *id,
            semantic: a.semantic.clone(),
            common: a.common.clone(),
            efficient: a.efficient.clone(),
        })
        .collect();
    crate::data::write_jsonl(path, &records)
}

pub fn read_atomic_jsonl(path: &Path) -> Result<BTreeMap<ItemId, AtomicEmbeddings>> {
    let records: Vec<AtomicRecord> = crate::data::read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| {
            (
                r.item_id,
                AtomicEmbeddings {
                    semantic: r.semantic,
                    common: r.common,
                    efficient: r.efficient,
                },
            )
        })
        .collect())
}
