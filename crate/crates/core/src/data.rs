//! Catalog, dataset rows and page views, with their on-disk formats.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Catalog record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    /// Root → leaf category ids.
    pub category_path: Vec<u32>,
    /// Dense semantic features (e.g. a title embedding).
    pub semantic: Vec<f64>,
    /// Raw efficiency statistics (click count, pay count, ...); standardized at encode time.
    pub efficiency: Vec<f64>,
    /// CTR-like efficient score in [0, 1].
    pub score: f64,
}

impl Item {
    pub fn leaf_category(&self) -> u32 {
        *self.category_path.last().expect("validated non-empty")
    }
}

#[derive(Clone, Debug, Default)]
pub struct Catalog {
    items: Vec<Item>,
    index: HashMap<ItemId, usize>,
}

impl Catalog {
    /// Validates and sorts items by id.
    pub fn new(mut items: Vec<Item>) -> Result<Self> {
        items.sort_by_key(|i| i.item_id);
        let mut bad = Vec::new();
        for w in items.windows(2) {
            if w[0].item_id == w[1].item_id {
                bad.push(format!("duplicate item {}", w[0].item_id));
            }
        }
        let (sem_dim, eff_dim) = items
            .first()
            .map(|i| (i.semantic.len(), i.efficiency.len()))
            .unwrap_or((0, 0));
        for item in &items {
            if item.category_path.is_empty() {
                bad.push(format!("item {} has an empty category path", item.item_id));
            }
            if item.semantic.len() != sem_dim || item.efficiency.len() != eff_dim {
                bad.push(format!("item {} has inconsistent feature dimensions", item.item_id));
            }
            if !item.score.is_finite() || !(0.0..=1.0).contains(&item.score) {
                bad.push(format!("item {} has efficient score {} outside [0,1]", item.item_id, item.score));
            }
            if item.semantic.iter().chain(&item.efficiency).any(|v| !v.is_finite()) {
                bad.push(format!("item {} has non-finite features", item.item_id));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Data(bad.join("; ")));
        }
        let index = items.iter().enumerate().map(|(i, it)| (it.item_id, i)).collect();
        Ok(Self { items, index })
    }

    pub fn get(&self, id: ItemId) -> Option<&Item> {
        self.index.get(&id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn semantic_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.semantic.len())
    }

    pub fn efficiency_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.efficiency.len())
    }

    pub fn scores(&self) -> BTreeMap<ItemId, f64> {
        self.items.iter().map(|i| (i.item_id, i.score)).collect()
    }

    pub fn paths(&self) -> BTreeMap<ItemId, Vec<u32>> {
        self.items.iter().map(|i| (i.item_id, i.category_path.clone())).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.items)
    }
}

/// One behavior in a user's history under a query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEvent {
    pub item_id: ItemId,
    pub behavior: String,
}

/// One impression: user, query, history, shown item and its labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub user_id: String,
    pub query: String,
    #[serde(default)]
    pub context: Vec<ContextEvent>,
    pub target_item: ItemId,
    pub relevance: u8,
    pub click: u8,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Tsv,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => DatasetFormat::Tsv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

/// Exposure page: items shown together with their click labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageView {
    pub pv_id: u64,
    pub entries: Vec<(ItemId, u8)>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadedDataset {
    pub rows: Vec<DatasetRow>,
    /// Lines that failed to parse or carried non-binary labels.
    pub malformed: usize,
    /// Distinct target ids absent from the catalog; their rows are dropped.
    pub unknown_items: Vec<ItemId>,
}

/// Fraction of malformed lines above which loading aborts.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

pub fn load_dataset(path: &Path, format: DatasetFormat, catalog: &Catalog) -> Result<LoadedDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedDataset::default();
    let mut unknown = BTreeSet::new();
    let mut lines = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let parsed = match format {
            DatasetFormat::Jsonl => serde_json::from_str::<DatasetRow>(&line).ok(),
            DatasetFormat::Tsv => parse_tsv_row(&line),
        };
        let Some(row) = parsed.filter(|r| r.relevance <= 1 && r.click <= 1) else {
            out.malformed += 1;
            continue;
        };
        if !catalog.contains(row.target_item) {
            unknown.insert(row.target_item);
            continue;
        }
        out.rows.push(row);
    }
    if lines > 0 && out.malformed as f64 / lines as f64 > MAX_MALFORMED_FRACTION {
        return Err(Error::Data(format!(
            "{} of {} lines in {} are malformed (limit {:.0}%)",
            out.malformed,
            lines,
            path.display(),
            MAX_MALFORMED_FRACTION * 100.0
        )));
    }
    if out.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), out.malformed);
    }
    if !unknown.is_empty() {
        log::warn!("{}: {} rows reference unknown items {:?}", path.display(), unknown.len(), unknown);
    }
    out.unknown_items = unknown.into_iter().collect();
    Ok(out)
}

/// `user \t query \t item:behavior,... \t target \t relevance \t click \t timestamp`
fn parse_tsv_row(line: &str) -> Option<DatasetRow> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 7 {
        return None;
    }
    let context = if f[2].is_empty() {
        Vec::new()
    } else {
        f[2].split(',')
            .map(|ev| {
                let (id, behavior) = ev.split_once(':')?;
                Some(ContextEvent {
                    item_id: ItemId(id.parse().ok()?),
                    behavior: behavior.to_string(),
                })
            })
            .collect::<Option<Vec<_>>>()?
    };
    Some(DatasetRow {
        user_id: f[0].to_string(),
        query: f[1].to_string(),
        context,
        target_item: ItemId(f[3].parse().ok()?),
        relevance: f[4].parse().ok()?,
        click: f[5].parse().ok()?,
        timestamp: f[6].parse().ok()?,
    })
}

pub fn write_tsv_row(row: &DatasetRow) -> String {
    let ctx: Vec<String> = row.context.iter().map(|e| format!("{}:{}", e.item_id, e.behavior)).collect();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        row.user_id,
        row.query,
        ctx.join(","),
        row.target_item,
        row.relevance,
        row.click,
        row.timestamp
    )
}

pub fn save_dataset(path: &Path, rows: &[DatasetRow], format: DatasetFormat) -> Result<()> {
    match format {
        DatasetFormat::Jsonl => write_jsonl(path, rows),
        DatasetFormat::Tsv => {
            let mut text = String::new();
            for r in rows {
                text.push_str(&write_tsv_row(r));
                text.push('\n');
            }
            fs::write(path, text).map_err(|e| Error::io(path, e))
        }
    }
}

/// Width of the timestamp bucket used to reconstruct page views.
pub const PV_BUCKET_SECONDS: u64 = 600;

/// Groups rows into page views keyed by (user, query, 10-minute bucket).
/// Items keep their first-seen order; a repeated item keeps its maximum click label.
pub fn group_page_views(rows: &[DatasetRow]) -> Vec<PageView> {
    let mut groups: BTreeMap<(&str, &str, u64), Vec<(ItemId, u8)>> = BTreeMap::new();
    for r in rows {
        let entries = groups
            .entry((r.user_id.as_str(), r.query.as_str(), r.timestamp / PV_BUCKET_SECONDS))
            .or_default();
        match entries.iter_mut().find(|(id, _)| *id == r.target_item) {
            Some(e) => e.1 = e.1.max(r.click),
            None => entries.push((r.target_item, r.click)),
        }
    }
    groups
        .into_values()
        .enumerate()
        .map(|(i, entries)| PageView { pv_id: i as u64, entries })
        .collect()
}

/// Drops test rows whose (query, target) pair occurs in training.
/// Returns the retained rows and the removed fraction.
pub fn zero_shot_split(train: &[DatasetRow], test: &[DatasetRow]) -> (Vec<DatasetRow>, f64) {
    let seen: BTreeSet<(&str, ItemId)> = train.iter().map(|r| (r.query.as_str(), r.target_item)).collect();
    let retained: Vec<DatasetRow> = test
        .iter()
        .filter(|r| !seen.contains(&(r.query.as_str(), r.target_item)))
        .cloned()
        .collect();
    let removed = if test.is_empty() {
        0.0
    } else {
        (test.len() - retained.len()) as f64 / test.len() as f64
    };
    (retained, removed)
}

/// Category tree input record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub category_id: u32,
    pub parent_id: Option<u32>,
    pub name: String,
}

#[derive(Clone, Debug, Default)]
pub struct CategoryTree {
    parents: BTreeMap<u32, Option<u32>>,
    names: BTreeMap<u32, String>,
}

impl CategoryTree {
    pub fn new(records: Vec<CategoryRecord>) -> Result<Self> {
        let mut tree = Self::default();
        for r in records {
            if tree.parents.insert(r.category_id, r.parent_id).is_some() {
                return Err(Error::Data(format!("duplicate category {}", r.category_id)));
            }
            tree.names.insert(r.category_id, r.name);
        }
        for (&id, parent) in &tree.parents {
            if let Some(p) = parent {
                if !tree.parents.contains_key(p) {
                    return Err(Error::Data(format!("category {id} has unknown parent {p}")));
                }
            }
        }
        Ok(tree)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    /// Root → `leaf` path.
    pub fn path(&self, leaf: u32) -> Result<Vec<u32>> {
        let mut path = vec![leaf];
        let mut cur = *self
            .parents
            .get(&leaf)
            .ok_or_else(|| Error::Lookup(format!("unknown category {leaf}")))?;
        while let Some(p) = cur {
            if path.contains(&p) || path.len() > self.parents.len() {
                return Err(Error::Data(format!("category cycle through {p}")));
            }
            path.push(p);
            cur = self.parents[&p];
        }
        path.reverse();
        Ok(path)
    }

    pub fn is_leaf(&self, id: u32) -> bool {
        self.parents.contains_key(&id) && !self.parents.values().any(|p| *p == Some(id))
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }
}

/// Category key of a URL: its first `words` dot-separated components after
/// dropping the scheme and path (`http://www.spiritplay.org/x` → `www.spiritplay`).
pub fn url_category(url: &str, words: usize) -> String {
    let host = url.split("://").last().unwrap_or(url);
    let host = host.split(['/', '?', '#']).next().unwrap_or(host);
    host.split('.').take(words.max(1)).collect::<Vec<_>>().join(".")
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let value = serde_json::from_str(line.trim_end()).map_err(|e| Error::Load {
                what: "jsonl record",
                offset: offset + e.column().saturating_sub(1) as u64,
                reason: format!("{}: {e}", path.display()),
            })?;
            out.push(value);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
