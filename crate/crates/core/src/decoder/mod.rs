//! Autoregressive docID generator.
//!
//! An encoder turns (user, query, context) features into a context vector `c`.
//! At position `t` the prefix summary is `s_t = pos[t] + Σ_{j<t} tok_j[y_j]`,
//! the hidden state is `h_t = tanh([c | s_t]·W + b)` and a per-position head maps
//! `h_t` to logits over the token values seen at that position. The softmax is
//! restricted to the trie children of the current prefix, both in training and
//! in decoding.

mod beam;
mod weights;

use std::path::Path;

use ndarray::{concatenate, s, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use beam::{constrained_beam_search, BeamResult, StepScorer};
pub use weights::{hierarchical_weight, PositionWeights, RelevanceOracle};

use crate::data::{DatasetRow, ItemId};
use crate::docid::{DocId, DocIndex, NodeId};
use crate::error::{Error, Result};
use crate::features::{EncodedContext, FeatureVocab};
use crate::nn::loss::log_softmax;
use crate::nn::{
    attention_backward, attention_forward, load_checkpoint, save_checkpoint, Activation, Adam, DenseCache, DenseNet,
    Grads, ParamId, ParamStore, Tensor2,
};
use crate::representation::{gather_rows, scatter_add_rows};
use crate::train::{epoch_batches, warn_on_trend, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub user_dim: usize,
    pub key_dim: usize,
    pub hidden_dim: usize,
    pub lambda_h: f64,
    pub lambda_s: f64,
    pub lambda_e: f64,
    /// When false every position gets weight `1/max_len` (plain cross-entropy).
    pub position_aware: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            user_dim: 16,
            key_dim: 16,
            hidden_dim: 64,
            lambda_h: 0.8,
            lambda_s: 0.1,
            lambda_e: 0.1,
            position_aware: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.user_dim == 0 || self.key_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("decoder dims must be >= 1".into()));
        }
        for (name, v) in [("lambda_h", self.lambda_h), ("lambda_s", self.lambda_s), ("lambda_e", self.lambda_e)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One training example: encoded features and the target docID.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSample {
    pub context: EncodedContext,
    pub item: ItemId,
    pub docid: DocId,
}

impl DecoderSample {
    pub fn from_rows(rows: &[DatasetRow], vocab: &FeatureVocab, index: &DocIndex) -> Result<Vec<Self>> {
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            match index.docid(r.target_item) {
                Some(d) => out.push(Self {
                    context: vocab.encode_row(r),
                    item: r.target_item,
                    docid: d.clone(),
                }),
                None => missing.push(r.target_item.to_string()),
            }
        }
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(Error::Data(format!("target items without a docID: {}", missing.join(", "))));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub vocab: FeatureVocab,
    /// Distinct token values per position, ascending; column `j` of head `t`
    /// scores `position_values[t][j]`.
    pub position_values: Vec<Vec<u32>>,
    pub store: ParamStore,
    user_emb: ParamId,
    token_emb: ParamId,
    context_emb: ParamId,
    encoder: DenseNet,
    tok_emb: Vec<ParamId>,
    pos_emb: ParamId,
    step: DenseNet,
    heads: Vec<DenseNet>,
}

#[derive(Serialize, Deserialize)]
struct DecoderMeta {
    config: DecoderConfig,
    vocab: FeatureVocab,
    position_values: Vec<Vec<u32>>,
}

const CKPT_KIND: &str = "decoder";
const TANH: [Activation; 1] = [Activation::Tanh];
const LINEAR: [Activation; 1] = [Activation::Identity];

/// Per-epoch training summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecoderTrainLog {
    pub epoch_losses: Vec<f64>,
    /// Greedy teacher-forced token accuracy per position, one vector per epoch.
    pub position_accuracy: Vec<Vec<f64>>,
}

/// Teacher-forced statistics of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

struct Row {
    sample: usize,
    t: usize,
    allowed: Vec<usize>,
    target: usize,
}

struct Forward {
    enc_inputs: EncoderInputs,
    enc_cache: DenseCache,
    rows: Vec<Row>,
    step_cache: DenseCache,
    /// Per position: row indices into `rows` and the head cache.
    heads: Vec<(Vec<usize>, DenseCache)>,
}

struct EncoderInputs {
    x_q: Vec<Tensor2>,
    x_c: Vec<Tensor2>,
    matrix: Tensor2,
}

fn masked_log_softmax(logits: ndarray::ArrayView1<f64>, allowed: &[usize]) -> Vec<f64> {
    let picked: Vec<f64> = allowed.iter().map(|&j| logits[j]).collect();
    log_softmax(&picked)
}

impl DecoderModel {
    pub fn new(config: DecoderConfig, vocab: FeatureVocab, index: &DocIndex, seed: u64) -> Result<Self> {
        config.validate()?;
        if index.is_empty() {
            return Err(Error::Index("decoder needs a non-empty docID index".into()));
        }
        let position_values: Vec<Vec<u32>> =
            (0..index.max_len()).map(|t| index.position_values(t).iter().copied().collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let h = c.hidden_dim;
        let user_emb = store.add_uniform("user_emb", vocab.num_users(), c.user_dim, &mut rng);
        let token_emb = store.add_uniform("token_emb", vocab.num_tokens(), c.key_dim, &mut rng);
        let context_emb = store.add_uniform("context_emb", vocab.num_items(), c.key_dim, &mut rng);
        let enc_in = c.user_dim + 2 * vocab.query_len * c.key_dim;
        let encoder = DenseNet::new(&mut store, "encoder", &[enc_in, h], &TANH, &mut rng);
        let tok_emb = position_values
            .iter()
            .enumerate()
            .map(|(t, v)| store.add_uniform(format!("tok_emb.{t}"), v.len(), h, &mut rng))
            .collect();
        let pos_emb = store.add_uniform("pos_emb", position_values.len(), h, &mut rng);
        let step = DenseNet::new(&mut store, "step", &[2 * h, h], &TANH, &mut rng);
        let heads = position_values
            .iter()
            .enumerate()
            .map(|(t, v)| DenseNet::new(&mut store, &format!("head.{t}"), &[h, v.len()], &LINEAR, &mut rng))
            .collect();
        Ok(Self {
            config,
            vocab,
            position_values,
            store,
            user_emb,
            token_emb,
            context_emb,
            encoder,
            tok_emb,
            pos_emb,
            step,
            heads,
        })
    }

    fn attach(meta: DecoderMeta, store: ParamStore) -> Result<Self> {
        let find = |n: &str| store.find(n).ok_or_else(|| Error::Lookup(format!("missing parameter {n}")));
        let n = meta.position_values.len();
        Ok(Self {
            user_emb: find("user_emb")?,
            token_emb: find("token_emb")?,
            context_emb: find("context_emb")?,
            encoder: DenseNet::attach(&store, "encoder", &TANH)?,
            tok_emb: (0..n).map(|t| find(&format!("tok_emb.{t}"))).collect::<Result<_>>()?,
            pos_emb: find("pos_emb")?,
            step: DenseNet::attach(&store, "step", &TANH)?,
            heads: (0..n)
                .map(|t| DenseNet::attach(&store, &format!("head.{t}"), &LINEAR))
                .collect::<Result<_>>()?,
            config: meta.config,
            vocab: meta.vocab,
            position_values: meta.position_values,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = DecoderMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            position_values: self.position_values.clone(),
        };
        save_checkpoint(path, CKPT_KIND, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store): (DecoderMeta, _) = load_checkpoint(path, CKPT_KIND)?;
        Self::attach(meta, store)
    }

    pub fn max_len(&self) -> usize {
        self.position_values.len()
    }

    /// The loss weighting this model trains with.
    pub fn position_weights(&self) -> Result<PositionWeights> {
        if self.config.position_aware {
            PositionWeights::decay(self.max_len(), self.config.lambda_h, self.config.lambda_s, self.config.lambda_e)
        } else {
            Ok(PositionWeights::uniform(self.max_len()))
        }
    }

    fn column(&self, t: usize, token: u32) -> Result<usize> {
        self.position_values
            .get(t)
            .and_then(|v| v.binary_search(&token).ok())
            .ok_or_else(|| Error::Data(format!("token {token} at position {t} is outside the decoder vocabulary")))
    }

    fn encoder_inputs(&self, store: &ParamStore, contexts: &[EncodedContext]) -> Result<EncoderInputs> {
        let (du, dk, dq) = (self.config.user_dim, self.config.key_dim, self.vocab.query_len);
        let users: Vec<usize> = contexts.iter().map(|c| c.user).collect();
        let x_u = gather_rows(store.get(self.user_emb), &users);
        let mut matrix = Tensor2::zeros((contexts.len(), du + 2 * dq * dk));
        let mut x_q = Vec::with_capacity(contexts.len());
        let mut x_c = Vec::with_capacity(contexts.len());
        for (i, ctx) in contexts.iter().enumerate() {
            let q = gather_rows(store.get(self.token_emb), &ctx.query);
            let c = gather_rows(store.get(self.context_emb), &ctx.context);
            let att = attention_forward(&q, &c, &c, dk)?;
            let mut row = matrix.row_mut(i);
            row.slice_mut(s![..du]).assign(&x_u.row(i));
            row.slice_mut(s![du..du + dq * dk]).assign(&Array1::from_iter(q.iter().copied()));
            row.slice_mut(s![du + dq * dk..]).assign(&Array1::from_iter(att.output.iter().copied()));
            x_q.push(q);
            x_c.push(c);
        }
        Ok(EncoderInputs { x_q, x_c, matrix })
    }

    /// Context vectors `c`, one row per input.
    pub fn context_vectors(&self, contexts: &[EncodedContext]) -> Result<Tensor2> {
        let inputs = self.encoder_inputs(&self.store, contexts)?;
        self.encoder.forward(&self.store, &inputs.matrix)
    }

    fn prefix_state(&self, store: &ParamStore, prefix_cols: &[usize]) -> Array1<f64> {
        let t = prefix_cols.len();
        let mut s = store.get(self.pos_emb).row(t).to_owned();
        for (j, &col) in prefix_cols.iter().enumerate() {
            s += &store.get(self.tok_emb[j]).row(col);
        }
        s
    }

    fn forward(&self, store: &ParamStore, batch: &[DecoderSample], index: &DocIndex) -> Result<Forward> {
        let contexts: Vec<EncodedContext> = batch.iter().map(|b| b.context.clone()).collect();
        let enc_inputs = self.encoder_inputs(store, &contexts)?;
        let enc_cache = self.encoder.forward_cached(store, &enc_inputs.matrix)?;
        let c = enc_cache.output();
        let h = self.config.hidden_dim;
        let trie = index.trie();

        let mut rows = Vec::new();
        let mut states: Vec<Array1<f64>> = Vec::new();
        for (i, sample) in batch.iter().enumerate() {
            let tokens = &sample.docid.tokens;
            if tokens.len() > self.max_len() {
                return Err(Error::Data(format!("docID {} is longer than the decoder supports", sample.docid)));
            }
            let cols: Vec<usize> = tokens.iter().enumerate().map(|(t, &v)| self.column(t, v)).collect::<Result<_>>()?;
            let mut node = trie.root();
            for t in 0..tokens.len() {
                let mut allowed = Vec::new();
                for (tok, _) in trie.children(node) {
                    allowed.push(self.column(t, tok)?);
                }
                let target = allowed
                    .iter()
                    .position(|&a| a == cols[t])
                    .ok_or_else(|| Error::Data(format!("docID {} is not in the index", sample.docid)))?;
                node = trie.child(node, tokens[t]).expect("target is a child");
                let mut x = Array1::zeros(2 * h);
                x.slice_mut(s![..h]).assign(&c.row(i));
                x.slice_mut(s![h..]).assign(&self.prefix_state(store, &cols[..t]));
                states.push(x);
                rows.push(Row {
                    sample: i,
                    t,
                    allowed,
                    target,
                });
            }
        }
        let views: Vec<_> = states.iter().map(|s| s.view().insert_axis(Axis(0))).collect();
        let x = concatenate(Axis(0), &views).map_err(|e| Error::dim("decoder states", 2 * h, e))?;
        let step_cache = self.step.forward_cached(store, &x)?;
        let mut heads = Vec::with_capacity(self.max_len());
        for t in 0..self.max_len() {
            let idx: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.t == t).map(|(k, _)| k).collect();
            let hs = step_cache.output().select(Axis(0), &idx);
            let cache = self.heads[t].forward_cached(store, &hs)?;
            heads.push((idx, cache));
        }
        Ok(Forward {
            enc_inputs,
            enc_cache,
            rows,
            step_cache,
            heads,
        })
    }

    /// For every (sample, position) row: log-probabilities over the allowed
    /// tokens, the greedy choice and the position weight.
    fn score_rows(
        &self,
        fw: &Forward,
        batch: &[DecoderSample],
        index: &DocIndex,
        oracle: &RelevanceOracle,
        weights: &PositionWeights,
    ) -> Result<Vec<(Vec<f64>, usize, f64)>> {
        let trie = index.trie();
        let mut out: Vec<Option<(Vec<f64>, usize, f64)>> = (0..fw.rows.len()).map(|_| None).collect();
        for (t, (idx, cache)) in fw.heads.iter().enumerate() {
            for (local, &k) in idx.iter().enumerate() {
                let row = &fw.rows[k];
                let sample = &batch[row.sample];
                let lp = masked_log_softmax(cache.output().row(local), &row.allowed);
                let greedy = (0..lp.len()).fold(0, |best, j| if lp[j] > lp[best] { j } else { best });
                let target_tok = sample.docid.tokens[t];
                let pred_tok = self.position_values[t][row.allowed[greedy]];
                let parent: NodeId = trie.walk(&sample.docid.tokens[..t]).expect("validated in forward");
                let score_of = |tok: u32| trie.child(parent, tok).and_then(|n| trie.score(n));
                let w = weights.weight(
                    t,
                    sample.docid.semantic_len,
                    target_tok,
                    pred_tok,
                    score_of(target_tok),
                    score_of(pred_tok),
                    oracle,
                )?;
                out[k] = Some((lp, greedy, w));
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every row has a head")).collect())
    }

    /// Weighted teacher-forced loss (mean over samples) with parameters `store`.
    pub fn loss_with(
        &self,
        store: &ParamStore,
        batch: &[DecoderSample],
        index: &DocIndex,
        oracle: &RelevanceOracle,
        weights: &PositionWeights,
    ) -> Result<f64> {
        let fw = self.forward(store, batch, index)?;
        let scored = self.score_rows(&fw, batch, index, oracle, weights)?;
        let total: f64 = fw.rows.iter().zip(&scored).map(|(r, (lp, _, w))| -w * lp[r.target]).sum();
        Ok(total / batch.len() as f64)
    }

    /// Loss, gradients and per-position greedy accuracy for one batch. The
    /// position weights are treated as constants.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        batch: &[DecoderSample],
        index: &DocIndex,
        oracle: &RelevanceOracle,
        weights: &PositionWeights,
    ) -> Result<(BatchStats, Grads)> {
        if batch.is_empty() {
            return Err(Error::Data("empty decoder batch".into()));
        }
        let fw = self.forward(store, batch, index)?;
        let scored = self.score_rows(&fw, batch, index, oracle, weights)?;
        let b = batch.len() as f64;
        let h = self.config.hidden_dim;
        let mut stats = BatchStats {
            loss: 0.0,
            correct: vec![0; self.max_len()],
            total: vec![0; self.max_len()],
        };
        let mut grads = store.zeros_like();
        let mut d_hidden = Tensor2::zeros(fw.step_cache.output().raw_dim());
        for (t, (idx, cache)) in fw.heads.iter().enumerate() {
            let mut d_logits = Tensor2::zeros(cache.output().raw_dim());
            for (local, &k) in idx.iter().enumerate() {
                let row = &fw.rows[k];
                let (lp, greedy, w) = &scored[k];
                stats.loss -= w * lp[row.target];
                stats.total[t] += 1;
                if *greedy == row.target {
                    stats.correct[t] += 1;
                }
                for (j, (&col, &l)) in row.allowed.iter().zip(lp).enumerate() {
                    let indicator = if j == row.target { 1.0 } else { 0.0 };
                    d_logits[[local, col]] = w / b * (l.exp() - indicator);
                }
            }
            let d_h = self.heads[t].backward(store, cache, &d_logits, &mut grads);
            for (local, &k) in idx.iter().enumerate() {
                d_hidden.row_mut(k).assign(&d_h.row(local));
            }
        }
        stats.loss /= b;

        let d_x = self.step.backward(store, &fw.step_cache, &d_hidden, &mut grads);
        let mut d_c = Tensor2::zeros(fw.enc_cache.output().raw_dim());
        for (k, row) in fw.rows.iter().enumerate() {
            let mut dc = d_c.row_mut(row.sample);
            dc += &d_x.slice(s![k, ..h]);
            let ds = d_x.slice(s![k, h..]);
            let mut pos = grads.get_mut(self.pos_emb).row_mut(row.t);
            pos += &ds;
            let tokens = &batch[row.sample].docid.tokens;
            for (j, &tok) in tokens[..row.t].iter().enumerate() {
                let col = self.column(j, tok)?;
                let mut g = grads.get_mut(self.tok_emb[j]).row_mut(col);
                g += &ds;
            }
        }
        let d_enc = self.encoder.backward(store, &fw.enc_cache, &d_c, &mut grads);
        self.encoder_backward(&fw.enc_inputs, batch, &d_enc, &mut grads)?;
        Ok((stats, grads))
    }

    fn encoder_backward(&self, inputs: &EncoderInputs, batch: &[DecoderSample], d_in: &Tensor2, grads: &mut Grads) -> Result<()> {
        let (du, dk, dq) = (self.config.user_dim, self.config.key_dim, self.vocab.query_len);
        let users: Vec<usize> = batch.iter().map(|b| b.context.user).collect();
        scatter_add_rows(grads.get_mut(self.user_emb), &users, &d_in.slice(s![.., ..du]).to_owned());
        for (i, sample) in batch.iter().enumerate() {
            let (q, c) = (&inputs.x_q[i], &inputs.x_c[i]);
            let d_q_raw = d_in
                .slice(s![i, du..du + dq * dk])
                .to_owned()
                .into_shape_with_order((dq, dk))
                .expect("contiguous");
            let d_att = d_in
                .slice(s![i, du + dq * dk..])
                .to_owned()
                .into_shape_with_order((dq, dk))
                .expect("contiguous");
            let att = attention_forward(q, c, c, dk)?;
            let g = attention_backward(q, c, c, &att.weights, &d_att, dk);
            scatter_add_rows(grads.get_mut(self.token_emb), &sample.context.query, &(d_q_raw + g.q));
            scatter_add_rows(grads.get_mut(self.context_emb), &sample.context.context, &(g.k + g.v));
        }
        Ok(())
    }

    /// Next-token scorer for one query, usable with [`constrained_beam_search`].
    pub fn scorer(&self, context: &EncodedContext) -> Result<QueryScorer<'_>> {
        let c = self.context_vectors(std::slice::from_ref(context))?;
        Ok(QueryScorer {
            model: self,
            context: c.row(0).to_owned(),
        })
    }

    /// Top-`k` docIDs for one query.
    pub fn decode(&self, context: &EncodedContext, index: &DocIndex, beam_width: usize, k: usize) -> Result<Vec<BeamResult>> {
        constrained_beam_search(&self.scorer(context)?, index.trie(), beam_width, k)
    }
}

pub struct QueryScorer<'a> {
    model: &'a DecoderModel,
    context: Array1<f64>,
}

impl StepScorer for QueryScorer<'_> {
    fn log_probs(&self, prefix: &[u32], allowed: &[u32]) -> Result<Vec<f64>> {
        let m = self.model;
        let t = prefix.len();
        if t >= m.max_len() {
            return Err(Error::Index(format!("prefix of length {t} exceeds the decoder's {} positions", m.max_len())));
        }
        let cols: Vec<usize> = prefix.iter().enumerate().map(|(j, &v)| m.column(j, v)).collect::<Result<_>>()?;
        let h = m.config.hidden_dim;
        let mut x = Tensor2::zeros((1, 2 * h));
        x.slice_mut(s![0, ..h]).assign(&self.context);
        x.slice_mut(s![0, h..]).assign(&m.prefix_state(&m.store, &cols));
        let hidden = m.step.forward(&m.store, &x)?;
        let logits = m.heads[t].forward(&m.store, &hidden)?;
        let allowed_cols: Vec<usize> = allowed.iter().map(|&v| m.column(t, v)).collect::<Result<_>>()?;
        Ok(masked_log_softmax(logits.row(0), &allowed_cols))
    }
}

/// Trains the decoder in place with Adam. On a non-finite loss the parameters
/// are restored to the end of the last completed epoch.
pub fn train_decoder(
    model: &mut DecoderModel,
    samples: &[DecoderSample],
    index: &DocIndex,
    oracle: &RelevanceOracle,
    config: &TrainConfig,
) -> Result<DecoderTrainLog> {
    config.validate("decoder")?;
    if samples.is_empty() {
        return Err(Error::Data("no decoder training samples".into()));
    }
    let weights = model.position_weights()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.store, config.lr);
    let mut last_good = model.store.clone();
    let mut log = DecoderTrainLog::default();
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut correct = vec![0usize; model.max_len()];
        let mut seen = vec![0usize; model.max_len()];
        for (step, idx) in epoch_batches(samples.len(), config.batch_size, &mut rng).iter().enumerate() {
            let batch: Vec<DecoderSample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let outcome = model
                .loss_and_grads(&model.store, &batch, index, oracle, &weights)
                .and_then(|(stats, grads)| {
                    if !stats.loss.is_finite() {
                        return Err(Error::NonFiniteLoss { stage: "train-decoder", epoch, step });
                    }
                    adam.step(&mut model.store, &grads).map(|_| stats)
                });
            match outcome {
                Ok(stats) => {
                    total += stats.loss * batch.len() as f64;
                    for t in 0..correct.len() {
                        correct[t] += stats.correct[t];
                        seen[t] += stats.total[t];
                    }
                }
                Err(e) => {
                    model.store = last_good;
                    return Err(e);
                }
            }
        }
        let mean = total / samples.len() as f64;
        let acc: Vec<f64> = correct.iter().zip(&seen).map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect();
        log::debug!("train-decoder epoch {epoch}: loss {mean:.6}, token accuracy {acc:?}");
        log.epoch_losses.push(mean);
        log.position_accuracy.push(acc);
        last_good.copy_from(&model.store)?;
    }
    warn_on_trend("train-decoder", &log.epoch_losses, config.smoothing_window);
    Ok(log)
}
