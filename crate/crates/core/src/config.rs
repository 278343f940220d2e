//! Pipeline configuration: presets, file loading, `HIGEN_` environment
//! overrides and range validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decoder::DecoderConfig;
use crate::docid::DocIdConfig;
use crate::error::{Error, Result};
use crate::expansion::Variant;
use crate::fusion::FusionConfig;
use crate::representation::TwoTowerConfig;
use crate::train::TrainConfig;

/// Prefix of environment variables that override config keys. Path segments
/// are separated by `__`, e.g. `HIGEN_DECODER__TRAIN__EPOCHS=40`.
pub const ENV_PREFIX: &str = "HIGEN_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub catalog: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    /// Category similarity table; when absent every pair of distinct
    /// categories counts as irrelevant.
    pub relevance: Option<PathBuf>,
    pub query_len: usize,
    pub context_len: usize,
}

/// Optimizer settings of one training stage. The seed is derived from the
/// pipeline seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTrain {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub smoothing_window: usize,
}

impl StageTrain {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            smoothing_window: self.smoothing_window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedStage {
    pub model: TwoTowerConfig,
    pub train: StageTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricStage {
    pub model: FusionConfig,
    pub train: StageTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocIdStage {
    pub k: usize,
    pub cluster_size: usize,
    pub max_len: usize,
    pub category_guided: bool,
}

impl DocIdStage {
    pub fn with_seed(&self, seed: u64) -> DocIdConfig {
        DocIdConfig {
            k: self.k,
            cluster_size: self.cluster_size,
            max_len: self.max_len,
            category_guided: self.category_guided,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderStage {
    pub model: DecoderConfig,
    pub train: StageTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub ks: Vec<usize>,
    /// Expansion variants to measure, e.g. `cluster-1` or `cluster-2-i2i`.
    pub variants: Vec<String>,
    pub cap: usize,
    /// I2I neighbours taken per decoded item.
    pub per_seed: usize,
    pub swing_alpha: f64,
    pub swing_top_n: Option<usize>,
    /// Worker threads for evaluation; 0 uses every core.
    pub threads: usize,
}

impl EvalConfig {
    pub fn parsed_variants(&self) -> Result<Vec<Variant>> {
        self.variants.iter().map(|v| v.parse()).collect()
    }

    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }
}

/// Which stages may execute. A disabled stage is never trained; later stages
/// that need it reuse its cached artifact or fail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageToggles {
    pub embed: bool,
    pub metric: bool,
    pub docids: bool,
    pub decoder: bool,
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            embed: true,
            metric: true,
            docids: true,
            decoder: true,
            eval: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Printed in reports; ablation flags rename it.
    pub label: String,
    pub seed: u64,
    pub work_dir: PathBuf,
    pub data: DataConfig,
    pub stages: StageToggles,
    pub embed: EmbedStage,
    pub metric: MetricStage,
    pub docid: DocIdStage,
    pub decoder: DecoderStage,
    pub eval: EvalConfig,
}

/// Names accepted by the `preset` key.
pub const PRESETS: [&str; 2] = ["desk", "paper"];

/// Full config tree of a named preset.
pub fn preset(name: &str) -> Result<Value> {
    let mut v = json!({
        "label": "full",
        "seed": 7,
        "work_dir": "work",
        "data": {
            "catalog": "data/catalog.jsonl",
            "train": "data/train.jsonl",
            "test": "data/test.jsonl",
            "relevance": "data/relevance.jsonl",
            "query_len": 6,
            "context_len": 4
        },
        "stages": StageToggles::default(),
        "embed": {
            "model": TwoTowerConfig::default(),
            "train": {"lr": 0.01, "batch_size": 64, "epochs": 8, "smoothing_window": 3}
        },
        "metric": {
            "model": FusionConfig::default(),
            "train": {"lr": 0.001, "batch_size": 64, "epochs": 5, "smoothing_window": 3}
        },
        "docid": {"k": 10, "cluster_size": 100, "max_len": 6, "category_guided": true},
        "decoder": {
            "model": DecoderConfig::default(),
            "train": {"lr": 0.01, "batch_size": 32, "epochs": 40, "smoothing_window": 5}
        },
        "eval": {
            "beam_width": 20,
            "ks": [1, 5, 10],
            "variants": ["direct", "cluster-2", "cluster-1", "i2i", "cluster-1-i2i"],
            "cap": 5000,
            "per_seed": 10,
            "swing_alpha": 1.0,
            "swing_top_n": 50,
            "threads": 0
        }
    });
    match name {
        "desk" => {}
        "paper" => merge(
            &mut v,
            json!({
                "embed": {
                    "model": {"tower_dim": 256, "atomic_dim": 256, "hidden_dim": 256},
                    "train": {"lr": 1e-4, "batch_size": 512, "epochs": 10}
                },
                "metric": {
                    "model": {"output_dim": 768, "hidden_dims": [768]},
                    "train": {"lr": 1e-5, "batch_size": 10, "epochs": 10}
                },
                "decoder": {
                    "model": {"hidden_dim": 256},
                    "train": {"lr": 5e-5, "batch_size": 64, "epochs": 10}
                },
                "eval": {"beam_width": 100, "ks": [1, 5, 10, 20]}
            }),
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(v)
}

/// Recursive object merge; non-object values in `patch` replace `base`.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `HIGEN_A__B=value` overrides. Values parse as JSON when possible
/// and are taken as strings otherwise. Unknown leaf keys are rejected later by
/// deserialization.
pub fn apply_env(tree: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut node = &mut *tree;
        for seg in &path[..path.len() - 1] {
            node = match node {
                Value::Object(map) => map.entry(seg.clone()).or_insert_with(|| json!({})),
                _ => return Err(Error::Config(format!("{key}: {seg} is not a config section"))),
            };
        }
        match node {
            Value::Object(map) => {
                map.insert(path[path.len() - 1].clone(), value);
            }
            _ => return Err(Error::Config(format!("{key} does not name a config key"))),
        }
    }
    Ok(())
}

impl PipelineConfig {
    /// Builds a config from a preset, a partial tree and environment overrides.
    /// The tree may carry a `preset` key; `default_preset` is used otherwise.
    pub fn resolve(
        partial: Value,
        default_preset: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut partial = match partial {
            Value::Null => json!({}),
            Value::Object(_) => partial,
            _ => return Err(Error::Config("config file must hold a table at the top level".into())),
        };
        let name = match partial.as_object_mut().and_then(|m| m.remove("preset")) {
            Some(Value::String(s)) => s,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => default_preset.to_string(),
        };
        let mut tree = preset(&name)?;
        merge(&mut tree, partial);
        apply_env(&mut tree, env)?;
        let config: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        Self::resolve(json!({}), name, std::iter::empty())
    }

    /// Reads a `.toml` or `.json` file, then applies the process environment.
    /// `default_preset` applies when the file has no `preset` key.
    pub fn load(path: &Path, default_preset: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tree: Value = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        Self::resolve(tree, default_preset, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.query_len == 0 || d.query_len > 64 || d.context_len == 0 || d.context_len > 64 {
            return Err(Error::Config("data.query_len and data.context_len must lie in 1..=64".into()));
        }
        self.embed.model.validate()?;
        self.metric.model.validate()?;
        self.docid.with_seed(0).validate()?;
        if self.docid.max_len > 32 {
            return Err(Error::Config(format!("docid.max_len must be <= 32, got {}", self.docid.max_len)));
        }
        self.decoder.model.validate()?;
        for (stage, t) in [("embed", &self.embed.train), ("metric", &self.metric.train), ("decoder", &self.decoder.train)] {
            t.with_seed(0).validate(stage)?;
            if t.epochs == 0 {
                return Err(Error::Config(format!("{stage}.epochs must be >= 1")));
            }
        }
        let e = &self.eval;
        if e.ks.is_empty() || e.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty with every k >= 1".into()));
        }
        if e.beam_width < e.max_k() {
            return Err(Error::Config(format!(
                "eval.beam_width ({}) must be >= the largest k ({})",
                e.beam_width,
                e.max_k()
            )));
        }
        if e.cap == 0 || e.per_seed == 0 {
            return Err(Error::Config("eval.cap and eval.per_seed must be >= 1".into()));
        }
        if !(e.swing_alpha > 0.0 && e.swing_alpha.is_finite()) {
            return Err(Error::Config(format!("eval.swing_alpha must be positive, got {}", e.swing_alpha)));
        }
        if e.swing_top_n == Some(0) {
            return Err(Error::Config("eval.swing_top_n must be >= 1 when set".into()));
        }
        let variants = e.parsed_variants()?;
        for v in variants {
            if let Variant::Cluster(k) | Variant::ClusterI2i(k) = v {
                if k > self.docid.max_len {
                    return Err(Error::Config(format!("variant {v} is deeper than docid.max_len")));
                }
            }
        }
        Ok(())
    }

    /// Turns off the position-aware loss and relabels the run.
    pub fn without_position_aware_loss(mut self) -> Self {
        self.decoder.model.position_aware = false;
        self.relabel("w/o position-aware loss");
        self
    }

    /// Turns off category-guided clustering and relabels the run.
    pub fn without_category_clustering(mut self) -> Self {
        self.docid.category_guided = false;
        self.relabel("w/o category-guided clustering");
        self
    }

    fn relabel(&mut self, tag: &str) {
        self.label = if self.label == "full" {
            tag.to_string()
        } else {
            format!("{} + {tag}", self.label)
        };
    }

    /// Rebases relative data paths and the work dir onto `root`.
    pub fn rebase(&mut self, root: &Path) {
        for p in [&mut self.data.catalog, &mut self.data.train, &mut self.data.test, &mut self.work_dir] {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        if let Some(p) = self.data.relevance.as_mut().filter(|p| p.is_relative()) {
            *p = root.join(&*p);
        }
    }
}
