//! Staged offline pipeline: embed → metric → docids → decoder → eval.
//!
//! Every stage writes its artifacts to `<work_dir>/<stage>-<hash>` where the
//! hash covers the stage config, its derived seed, the digests of the data
//! files it reads and the hashes of its upstream stages. A directory holding
//! a `done.json` marker with the full hash is reused instead of recomputed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::data::{
    group_page_views, load_dataset, save_dataset, zero_shot_split, Catalog, ContextEvent, DatasetFormat, DatasetRow,
    ItemId, PV_BUCKET_SECONDS,
};
use crate::decoder::{train_decoder, DecoderModel, DecoderSample, DecoderTrainLog, RelevanceOracle};
use crate::docid::{build_docids, load_index, save_index, DocIndex};
use crate::error::{Error, Result};
use crate::eval::{recall_table, set_recall, StageTimings};
use crate::expansion::{expand, swing_scores, I2ITable, Variant};
use crate::features::FeatureVocab;
use crate::fusion::{read_fusion_jsonl, train_metric, write_fusion_jsonl, FusionModel};
use crate::representation::{
    export_atomic_embeddings, read_atomic_jsonl, train_embedding, write_atomic_jsonl, AtomicEmbeddings, FeatureBatch,
    TrainLog, TwoTowerModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Embed,
    Metric,
    Docids,
    Decoder,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Embed, Stage::Metric, Stage::Docids, Stage::Decoder, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::Metric => "metric",
            Stage::Docids => "docids",
            Stage::Decoder => "decoder",
            Stage::Eval => "eval",
        }
    }

    fn enabled(self, config: &PipelineConfig) -> bool {
        let t = &config.stages;
        match self {
            Stage::Embed => t.embed,
            Stage::Metric => t.metric,
            Stage::Docids => t.docids,
            Stage::Decoder => t.decoder,
            Stage::Eval => t.eval,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Artifact file names inside a stage directory.
pub mod files {
    pub const DONE: &str = "done.json";
    pub const EMBED_MODEL: &str = "model.json";
    pub const ATOMIC: &str = "atomic.jsonl";
    pub const FUSION_MODEL: &str = "fusion.json";
    pub const FUSION: &str = "fusion.jsonl";
    pub const INDEX: &str = "index.bin";
    pub const DOCIDS: &str = "docids.jsonl";
    pub const DECODER: &str = "decoder.json";
    pub const LOG: &str = "log.json";
    pub const I2I: &str = "i2i.jsonl";
    pub const METRICS: &str = "metrics.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub hash: String,
    pub dir: PathBuf,
    /// True when a cached artifact was reused.
    pub skipped: bool,
}

/// Final epoch losses of the three training stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub embed_loss: Option<f64>,
    pub metric_loss: Option<f64>,
    pub decoder_loss: Option<f64>,
    /// Teacher-forced token accuracy per position in the last decoder epoch.
    pub decoder_position_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    /// Mean size of the final recall set.
    pub recall_num: f64,
    /// Fraction of queries with a truth item anywhere in the recall set.
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuerySetMetrics {
    pub queries: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub variants: BTreeMap<String, VariantMetrics>,
}

/// Everything in a report that must reproduce bit for bit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Test queries whose (query, target) pair occurs in training.
    pub held_in: QuerySetMetrics,
    /// The remaining test queries.
    pub zero_shot: QuerySetMetrics,
    /// Fraction of test rows removed by the zero-shot split.
    pub removed_fraction: f64,
    pub train: TrainSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config: PipelineConfig,
    pub metrics: EvalMetrics,
    pub stages: Vec<StageRecord>,
    pub timings: StageTimings,
}

impl EvalReport {
    /// Human-readable multi-line summary.
    pub fn summary(&self) -> String {
        let mut s = format!("run: {}\n", self.label);
        let m = &self.metrics;
        for (name, set) in [("held-in", &m.held_in), ("zero-shot", &m.zero_shot)] {
            s.push_str(&format!("{name} queries: {}\n", set.queries));
            let recalls: Vec<String> = set.recall_at_k.iter().map(|(k, r)| format!("R@{k}={r:.4}")).collect();
            s.push_str(&format!("  {}\n", recalls.join("  ")));
            for (v, vm) in &set.variants {
                s.push_str(&format!("  {v:<16} recall={:.4}  RecallNum={:.1}\n", vm.recall, vm.recall_num));
            }
        }
        s.push_str(&format!("zero-shot split removed {:.4} of test rows\n", m.removed_fraction));
        for r in &self.stages {
            let secs = self.timings.0.get(r.stage.name()).copied().unwrap_or(0.0);
            let state = if r.skipped { "cached" } else { "ran" };
            s.push_str(&format!("  {:<8} {state:<6} {secs:>8.2}s  {}\n", r.stage.name(), r.dir.display()));
        }
        s
    }
}

/// Seed of one pipeline component, derived from the top-level seed.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{component}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loaded inputs shared by all stages.
pub struct Inputs {
    pub catalog: Catalog,
    pub train: Vec<DatasetRow>,
    pub test: Vec<DatasetRow>,
    pub oracle: RelevanceOracle,
    digests: BTreeMap<&'static str, String>,
}

impl Inputs {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let d = &config.data;
        let catalog = Catalog::load(&d.catalog)?;
        let train = load_dataset(&d.train, DatasetFormat::from_path(&d.train), &catalog)?.rows;
        let test = load_dataset(&d.test, DatasetFormat::from_path(&d.test), &catalog)?.rows;
        if train.is_empty() {
            return Err(Error::Data(format!("training set {} is empty", d.train.display())));
        }
        let mut digests = BTreeMap::new();
        digests.insert("catalog", file_digest(&d.catalog)?);
        digests.insert("train", file_digest(&d.train)?);
        digests.insert("test", file_digest(&d.test)?);
        let oracle = match &d.relevance {
            Some(p) => {
                digests.insert("relevance", file_digest(p)?);
                RelevanceOracle::load(p)?
            }
            None => RelevanceOracle::new(Vec::new())?,
        };
        Ok(Self {
            catalog,
            train,
            test,
            oracle,
            digests,
        })
    }

    fn digest(&self, name: &str) -> String {
        self.digests.get(name).cloned().unwrap_or_default()
    }

    fn clicked_train(&self) -> Vec<DatasetRow> {
        self.train.iter().filter(|r| r.click == 1).cloned().collect()
    }

    fn vocab(&self, config: &PipelineConfig) -> Result<FeatureVocab> {
        FeatureVocab::build(&self.train, &self.catalog, config.data.query_len, config.data.context_len)
    }
}

/// One evaluation query: a page view of the test split and its clicked items.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub user_id: String,
    pub query: String,
    pub context: Vec<ContextEvent>,
    pub truths: Vec<ItemId>,
}

/// Groups test rows by (user, query, time bucket); groups without a click are dropped.
pub fn eval_queries(rows: &[DatasetRow]) -> Vec<EvalQuery> {
    let mut groups: BTreeMap<(&str, &str, u64), EvalQuery> = BTreeMap::new();
    for r in rows {
        let q = groups
            .entry((r.user_id.as_str(), r.query.as_str(), r.timestamp / PV_BUCKET_SECONDS))
            .or_insert_with(|| EvalQuery {
                user_id: r.user_id.clone(),
                query: r.query.clone(),
                context: r.context.clone(),
                truths: Vec::new(),
            });
        if r.click == 1 && !q.truths.contains(&r.target_item) {
            q.truths.push(r.target_item);
        }
    }
    groups.into_values().filter(|q| !q.truths.is_empty()).collect()
}

/// What one stage produced, either freshly or from cache.
enum Output {
    Atomic(BTreeMap<ItemId, AtomicEmbeddings>),
    Fusion(BTreeMap<ItemId, Vec<f64>>),
    Index(Box<DocIndex>),
    Decoder(Box<DecoderModel>),
    Metrics(Box<EvalMetrics>),
}

#[derive(Default)]
struct State {
    atomic: Option<BTreeMap<ItemId, AtomicEmbeddings>>,
    fusion: Option<BTreeMap<ItemId, Vec<f64>>>,
    index: Option<DocIndex>,
    decoder: Option<DecoderModel>,
    metrics: Option<EvalMetrics>,
}

#[derive(Serialize, Deserialize)]
struct DoneMarker {
    stage: Stage,
    hash: String,
}

/// Result of [`Pipeline::run`].
#[derive(Debug)]
pub struct RunOutcome {
    /// Present when the eval stage ran or was reused.
    pub report: Option<EvalReport>,
    pub stages: Vec<StageRecord>,
}

/// Runs stages in order with caching. Completed stage records stay
/// available after a failure.
pub struct Pipeline {
    config: PipelineConfig,
    records: Vec<StageRecord>,
    timings: StageTimings,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            records: Vec::new(),
            timings: StageTimings::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Stages finished so far, including after an error.
    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    fn stage_hash(&self, stage: Stage, inputs: &Inputs) -> Result<String> {
        let c = &self.config;
        let upstream: Vec<&str> = self.records.iter().map(|r| r.hash.as_str()).collect();
        let stage_config = match stage {
            Stage::Embed => json!({
                "embed": c.embed,
                "data": [inputs.digest("catalog"), inputs.digest("train"), c.data.query_len, c.data.context_len],
            }),
            Stage::Metric => json!({"metric": c.metric, "train": inputs.digest("train")}),
            Stage::Docids => json!({"docid": c.docid, "catalog": inputs.digest("catalog")}),
            Stage::Decoder => json!({
                "decoder": c.decoder,
                "data": [inputs.digest("train"), inputs.digest("relevance"), c.data.query_len, c.data.context_len],
            }),
            Stage::Eval => {
                let mut eval = serde_json::to_value(&c.eval)?;
                // Thread count never changes results.
                eval.as_object_mut().map(|m| m.remove("threads"));
                json!({"eval": eval, "test": inputs.digest("test")})
            }
        };
        let key = json!({
            "version": env!("CARGO_PKG_VERSION"),
            "stage": stage,
            "seed": c.seed,
            "upstream": upstream,
            "config": stage_config,
        });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&key)?)))
    }

    fn stage_dir(&self, stage: Stage, hash: &str) -> PathBuf {
        self.config.work_dir.join(format!("{}-{}", stage.name(), &hash[..16]))
    }

    fn cached(dir: &Path, hash: &str) -> bool {
        read_json::<DoneMarker>(&dir.join(files::DONE)).is_ok_and(|m| m.hash == hash)
    }

    /// Runs every stage up to and including `until`.
    pub fn run(&mut self, until: Stage) -> Result<RunOutcome> {
        self.records.clear();
        self.timings = StageTimings::default();
        let inputs = Inputs::load(&self.config)?;
        let mut state = State::default();
        for stage in Stage::ALL.into_iter().filter(|s| *s <= until) {
            let hash = self.stage_hash(stage, &inputs)?;
            let dir = self.stage_dir(stage, &hash);
            let start = Instant::now();
            let skipped = Self::cached(&dir, &hash);
            let output = if skipped {
                log::info!("{stage}: reusing {}", dir.display());
                Self::load_stage(stage, &dir)?
            } else if stage.enabled(&self.config) {
                log::info!("{stage}: running into {}", dir.display());
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let out = self.run_stage(stage, &dir, &inputs, &state)?;
                write_json(&dir.join(files::DONE), &DoneMarker { stage, hash: hash.clone() })?;
                out
            } else {
                return Err(Error::Config(format!(
                    "stage {stage} is disabled and no cached artifact exists at {}",
                    dir.display()
                )));
            };
            match output {
                Output::Atomic(a) => state.atomic = Some(a),
                Output::Fusion(f) => state.fusion = Some(f),
                Output::Index(i) => state.index = Some(*i),
                Output::Decoder(d) => state.decoder = Some(*d),
                Output::Metrics(m) => state.metrics = Some(*m),
            }
            self.timings.0.insert(stage.name().to_string(), start.elapsed().as_secs_f64());
            self.records.push(StageRecord { stage, hash, dir, skipped });
        }
        let report = state.metrics.map(|metrics| EvalReport {
            label: self.config.label.clone(),
            config: self.config.clone(),
            metrics,
            stages: self.records.clone(),
            timings: self.timings.clone(),
        });
        if let Some(r) = &report {
            write_json(&self.config.work_dir.join("report.json"), r)?;
        }
        Ok(RunOutcome {
            report,
            stages: self.records.clone(),
        })
    }

    fn load_stage(stage: Stage, dir: &Path) -> Result<Output> {
        Ok(match stage {
            Stage::Embed => Output::Atomic(read_atomic_jsonl(&dir.join(files::ATOMIC))?),
            Stage::Metric => Output::Fusion(read_fusion_jsonl(&dir.join(files::FUSION))?),
            Stage::Docids => Output::Index(Box::new(load_index(&dir.join(files::INDEX))?)),
            Stage::Decoder => Output::Decoder(Box::new(DecoderModel::load(&dir.join(files::DECODER))?)),
            Stage::Eval => Output::Metrics(Box::new(read_json(&dir.join(files::METRICS))?)),
        })
    }

    fn run_stage(&self, stage: Stage, dir: &Path, inputs: &Inputs, state: &State) -> Result<Output> {
        let c = &self.config;
        let seed = |name: &str| derive_seed(c.seed, name);
        let missing = |what: &str| Error::Config(format!("stage {stage} needs the {what} from an earlier stage"));
        match stage {
            Stage::Embed => {
                let vocab = inputs.vocab(c)?;
                let refs: Vec<&DatasetRow> = inputs.train.iter().collect();
                let batch = FeatureBatch::from_rows(&refs, &inputs.catalog, &vocab)?;
                let mut model = TwoTowerModel::new(
                    c.embed.model.clone(),
                    vocab,
                    inputs.catalog.semantic_dim(),
                    inputs.catalog.efficiency_dim(),
                    seed("embed.init"),
                )?;
                let log = train_embedding(&mut model, &batch, &c.embed.train.with_seed(seed("embed.train")))?;
                let atomic = export_atomic_embeddings(&model, &inputs.catalog)?;
                model.save(&dir.join(files::EMBED_MODEL))?;
                write_atomic_jsonl(&dir.join(files::ATOMIC), &atomic)?;
                write_json(&dir.join(files::LOG), &log)?;
                Ok(Output::Atomic(atomic))
            }
            Stage::Metric => {
                let atomic = state.atomic.as_ref().ok_or_else(|| missing("atomic embeddings"))?;
                let pvs = group_page_views(&inputs.train);
                let mut model = FusionModel::new(c.metric.model.clone(), c.embed.model.atomic_dim, seed("metric.init"))?;
                let log = train_metric(&mut model, atomic, &pvs, &c.metric.train.with_seed(seed("metric.train")))?;
                let fusion = model.fuse_all(atomic)?;
                model.save(&dir.join(files::FUSION_MODEL))?;
                write_fusion_jsonl(&dir.join(files::FUSION), &fusion)?;
                write_json(&dir.join(files::LOG), &log)?;
                Ok(Output::Fusion(fusion))
            }
            Stage::Docids => {
                let fusion = state.fusion.as_ref().ok_or_else(|| missing("fusion embeddings"))?;
                let cat = &inputs.catalog;
                let assignment = build_docids(fusion, &cat.scores(), &cat.paths(), &c.docid.with_seed(seed("docids")))?;
                let index = DocIndex::new(assignment)?;
                save_index(&dir.join(files::INDEX), &index)?;
                let listing: Vec<serde_json::Value> = index
                    .docids()
                    .iter()
                    .map(|(id, d)| json!({"item_id": id, "docid": d.to_string()}))
                    .collect();
                crate::data::write_jsonl(&dir.join(files::DOCIDS), &listing)?;
                Ok(Output::Index(Box::new(index)))
            }
            Stage::Decoder => {
                let index = state.index.as_ref().ok_or_else(|| missing("docID index"))?;
                let vocab = inputs.vocab(c)?;
                let samples = DecoderSample::from_rows(&inputs.clicked_train(), &vocab, index)?;
                let mut model = DecoderModel::new(c.decoder.model.clone(), vocab, index, seed("decoder.init"))?;
                let log = train_decoder(
                    &mut model,
                    &samples,
                    index,
                    &inputs.oracle,
                    &c.decoder.train.with_seed(seed("decoder.train")),
                )?;
                model.save(&dir.join(files::DECODER))?;
                write_json(&dir.join(files::LOG), &log)?;
                Ok(Output::Decoder(Box::new(model)))
            }
            Stage::Eval => {
                let index = state.index.as_ref().ok_or_else(|| missing("docID index"))?;
                let decoder = state.decoder.as_ref().ok_or_else(|| missing("decoder"))?;
                let variants = c.eval.parsed_variants()?;
                let i2i = swing_scores(
                    &inputs.clicked_train().iter().map(|r| (r.user_id.clone(), r.target_item)).collect::<Vec<_>>(),
                    c.eval.swing_alpha,
                    c.eval.swing_top_n,
                )?;
                i2i.save(&dir.join(files::I2I))?;
                let mut metrics = self.evaluate(inputs, index, decoder, &i2i, &variants)?;
                metrics.train = self.train_summary()?;
                write_json(&dir.join(files::METRICS), &metrics)?;
                Ok(Output::Metrics(Box::new(metrics)))
            }
        }
    }

    fn train_summary(&self) -> Result<TrainSummary> {
        let dir = |s: Stage| self.records.iter().find(|r| r.stage == s).map(|r| r.dir.join(files::LOG));
        let last = |log: &TrainLog| log.epoch_losses.last().copied();
        let mut out = TrainSummary::default();
        if let Some(p) = dir(Stage::Embed) {
            out.embed_loss = last(&read_json(&p)?);
        }
        if let Some(p) = dir(Stage::Metric) {
            out.metric_loss = last(&read_json(&p)?);
        }
        if let Some(p) = dir(Stage::Decoder) {
            let log: DecoderTrainLog = read_json(&p)?;
            out.decoder_loss = log.epoch_losses.last().copied();
            out.decoder_position_accuracy = log.position_accuracy.last().cloned().unwrap_or_default();
        }
        Ok(out)
    }

    fn evaluate(
        &self,
        inputs: &Inputs,
        index: &DocIndex,
        decoder: &DecoderModel,
        i2i: &I2ITable,
        variants: &[Variant],
    ) -> Result<EvalMetrics> {
        let seen: BTreeSet<(&str, ItemId)> = inputs.train.iter().map(|r| (r.query.as_str(), r.target_item)).collect();
        let (zero_rows, removed_fraction) = zero_shot_split(&inputs.train, &inputs.test);
        let held_rows: Vec<DatasetRow> = inputs
            .test
            .iter()
            .filter(|r| seen.contains(&(r.query.as_str(), r.target_item)))
            .cloned()
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.eval.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start evaluation threads: {e}")))?;
        let held_in = pool.install(|| self.score_queries(&eval_queries(&held_rows), index, decoder, i2i, variants))?;
        let zero_shot = pool.install(|| self.score_queries(&eval_queries(&zero_rows), index, decoder, i2i, variants))?;
        Ok(EvalMetrics {
            held_in,
            zero_shot,
            removed_fraction,
            train: TrainSummary::default(),
        })
    }

    fn score_queries(
        &self,
        queries: &[EvalQuery],
        index: &DocIndex,
        decoder: &DecoderModel,
        i2i: &I2ITable,
        variants: &[Variant],
    ) -> Result<QuerySetMetrics> {
        let e = &self.config.eval;
        let per_query: Vec<(Vec<ItemId>, Vec<Vec<ItemId>>)> = queries
            .par_iter()
            .map(|q| {
                let ctx = decoder.vocab.encode(&q.user_id, &q.query, &q.context);
                let decoded = decoder.decode(&ctx, index, e.beam_width, e.max_k())?;
                let ranked: Vec<ItemId> = decoded.iter().map(|b| b.item).collect();
                let pairs: Vec<(Vec<u32>, f64)> = decoded.into_iter().map(|b| (b.tokens, b.log_prob)).collect();
                let sets = variants
                    .iter()
                    .map(|v| Ok(expand(*v, &pairs, index, Some(i2i), e.per_seed, e.cap)?.items()))
                    .collect::<Result<Vec<_>>>()?;
                Ok((ranked, sets))
            })
            .collect::<Result<_>>()?;
        let truths: Vec<Vec<ItemId>> = queries.iter().map(|q| q.truths.clone()).collect();
        let ranked: Vec<Vec<ItemId>> = per_query.iter().map(|p| p.0.clone()).collect();
        let mut out = QuerySetMetrics {
            queries: queries.len(),
            recall_at_k: if queries.is_empty() {
                e.ks.iter().map(|&k| (k, 0.0)).collect()
            } else {
                recall_table(&ranked, &truths, &e.ks)
            },
            variants: BTreeMap::new(),
        };
        for (vi, v) in variants.iter().enumerate() {
            let sets: Vec<Vec<ItemId>> = per_query.iter().map(|p| p.1[vi].clone()).collect();
            let total: usize = sets.iter().map(Vec::len).sum();
            out.variants.insert(
                v.to_string(),
                VariantMetrics {
                    recall_num: if sets.is_empty() { 0.0 } else { total as f64 / sets.len() as f64 },
                    recall: set_recall(&sets, &truths),
                },
            );
        }
        Ok(out)
    }
}

/// Runs the whole pipeline and returns its report.
pub fn run_pipeline(config: &PipelineConfig) -> Result<EvalReport> {
    let mut p = Pipeline::new(config.clone())?;
    p.run(Stage::Eval)?
        .report
        .ok_or_else(|| Error::Config("evaluation stage did not produce a report".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub recall: Vec<f64>,
    pub mean: f64,
}

/// Held-in Recall@k of the full configuration and each ablation over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn summary(&self) -> String {
        let mut s = format!("held-in Recall@{} over seeds {:?}\n", self.k, self.seeds);
        for r in &self.rows {
            let per: Vec<String> = r.recall.iter().map(|x| format!("{x:.3}")).collect();
            s.push_str(&format!("  {:<34} mean {:.4}  [{}]\n", r.label, r.mean, per.join(" ")));
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Runs the full configuration and both ablations for every seed. Runs share
/// `base.work_dir`, so stages common to several variants are computed once.
pub fn ablation_study(base: &PipelineConfig, seeds: &[u64], k: usize) -> Result<AblationReport> {
    if !base.eval.ks.contains(&k) {
        return Err(Error::Config(format!("eval.ks must contain {k} for the ablation study")));
    }
    let variants = [
        base.clone(),
        base.clone().without_position_aware_loss(),
        base.clone().without_category_clustering(),
    ];
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|v| AblationRow {
            label: v.label.clone(),
            recall: Vec::new(),
            mean: 0.0,
        })
        .collect();
    for &seed in seeds {
        for (row, v) in rows.iter_mut().zip(&variants) {
            let mut cfg = v.clone();
            cfg.seed = seed;
            let report = run_pipeline(&cfg)?;
            row.recall.push(report.metrics.held_in.recall_at_k[&k]);
        }
    }
    for r in &mut rows {
        r.mean = r.recall.iter().sum::<f64>() / r.recall.len().max(1) as f64;
    }
    Ok(AblationReport {
        k,
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Per-fold zero-shot metrics of a query-level k-fold split of the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<QuerySetMetrics>,
    pub mean_recall_at_k: BTreeMap<usize, f64>,
}

/// Splits training queries into `folds` groups; each fold trains on the rest
/// and evaluates on its clicked rows. Fold data lives under `work_dir/cv`.
pub fn cross_validate(base: &PipelineConfig, folds: usize) -> Result<CrossValidationReport> {
    if folds < 2 {
        return Err(Error::Config(format!("cross-validation needs at least 2 folds, got {folds}")));
    }
    let inputs = Inputs::load(base)?;
    let mut queries: Vec<&str> = inputs
        .train
        .iter()
        .map(|r| r.query.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if queries.len() < folds {
        return Err(Error::Data(format!("{} distinct queries cannot fill {folds} folds", queries.len())));
    }
    queries.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(base.seed, "cv")));
    let fold_of: BTreeMap<&str, usize> = queries.iter().enumerate().map(|(i, q)| (*q, i % folds)).collect();
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let dir = base.work_dir.join("cv").join(format!("fold-{f}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (held, kept): (Vec<DatasetRow>, Vec<DatasetRow>) =
            inputs.train.iter().cloned().partition(|r| fold_of[r.query.as_str()] == f);
        let test: Vec<DatasetRow> = held.into_iter().filter(|r| r.click == 1).collect();
        let mut cfg = base.clone();
        cfg.data.train = dir.join("train.jsonl");
        cfg.data.test = dir.join("test.jsonl");
        save_dataset(&cfg.data.train, &kept, DatasetFormat::Jsonl)?;
        save_dataset(&cfg.data.test, &test, DatasetFormat::Jsonl)?;
        cfg.label = format!("{} fold {f}", base.label);
        out.push(run_pipeline(&cfg)?.metrics.zero_shot);
    }
    let mut mean = BTreeMap::new();
    for &k in &base.eval.ks {
        mean.insert(k, out.iter().map(|m| m.recall_at_k[&k]).sum::<f64>() / folds as f64);
    }
    Ok(CrossValidationReport {
        folds: out,
        mean_recall_at_k: mean,
    })
}
