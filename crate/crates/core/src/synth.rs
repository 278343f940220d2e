//! Synthetic corpus with known query → item ground truth.
//!
//! Items sit in flat categories; categories form groups that the relevance
//! table treats as related. Every training query names its category, its group
//! and one query-specific word, and always leads to the same item. Each
//! impression is a page view with the clicked target, an unclicked sibling from
//! the same category and unclicked items from other categories. The test split
//! repeats every training query once with a fresh user (held-in) and adds novel
//! queries for items never targeted in training (zero-shot).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, write_jsonl, Catalog, CategoryRecord, ContextEvent, DatasetFormat, DatasetRow, Item, ItemId};
use crate::decoder::RelevanceOracle;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub items: usize,
    pub categories: usize,
    /// Categories are split round-robin into this many related groups.
    pub groups: usize,
    pub train_queries: usize,
    pub novel_queries: usize,
    pub impressions_per_query: usize,
    pub users: usize,
    pub negatives_per_view: usize,
    pub semantic_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            items: 500,
            categories: 50,
            groups: 10,
            train_queries: 200,
            novel_queries: 50,
            impressions_per_query: 3,
            users: 30,
            negatives_per_view: 3,
            semantic_dim: 8,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub catalog: Catalog,
    pub categories: Vec<CategoryRecord>,
    pub train: Vec<DatasetRow>,
    pub test: Vec<DatasetRow>,
    pub relevance: RelevanceOracle,
}

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const CATEGORIES_FILE: &str = "categories.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const RELEVANCE_FILE: &str = "relevance.jsonl";

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.groups == 0 || self.users == 0 {
            return Err(Error::Config("synthetic corpus needs categories, groups and users".into()));
        }
        if self.items < 2 * self.categories {
            return Err(Error::Config("synthetic corpus needs at least two items per category".into()));
        }
        if self.train_queries + self.novel_queries > self.items {
            return Err(Error::Config("more queries than items to target".into()));
        }
        if self.impressions_per_query == 0 {
            return Err(Error::Config("impressions_per_query must be >= 1".into()));
        }
        Ok(())
    }
}

fn category_of(item: usize, categories: usize) -> u32 {
    (item % categories) as u32 + 1
}

fn group_of(category: u32, groups: usize) -> usize {
    (category as usize - 1) % groups
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers: Vec<Vec<f64>> = (0..config.categories)
        .map(|_| (0..config.semantic_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let items: Vec<Item> = (0..config.items)
        .map(|i| {
            let cat = category_of(i, config.categories);
            let score: f64 = rng.random_range(0.05..0.95);
            Item {
                item_id: ItemId(i as u64 + 1),
                category_path: vec![cat],
                semantic: centers[cat as usize - 1].iter().map(|c| c + rng.random_range(-0.1..0.1)).collect(),
                efficiency: vec![score, rng.random_range(1.0..5.0), rng.random_range(0.0..100.0)],
                score,
            }
        })
        .collect();
    let catalog = Catalog::new(items)?;
    let by_category: Vec<Vec<ItemId>> = (1..=config.categories as u32)
        .map(|c| {
            catalog
                .items()
                .iter()
                .filter(|it| it.category_path[0] == c)
                .map(|it| it.item_id)
                .collect()
        })
        .collect();

    let mut targets: Vec<usize> = (0..config.items).collect();
    targets.shuffle(&mut rng);
    let query_text = |cat: u32, word: &str| format!("cat{cat} style{} {word}", group_of(cat, config.groups));

    let mut history: Vec<Vec<ItemId>> = vec![Vec::new(); config.users];
    let context_for = |user: usize, history: &mut Vec<Vec<ItemId>>, clicked: ItemId| {
        let ctx: Vec<ContextEvent> = history[user]
            .iter()
            .rev()
            .take(3)
            .rev()
            .map(|&item_id| ContextEvent {
                item_id,
                behavior: "click".into(),
            })
            .collect();
        history[user].push(clicked);
        ctx
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut ts = 0u64;
    for (q, &t) in targets.iter().take(config.train_queries).enumerate() {
        let target = ItemId(t as u64 + 1);
        let cat = category_of(t, config.categories);
        let query = query_text(cat, &format!("w{q}"));
        for _ in 0..config.impressions_per_query {
            ts += 3600;
            let user = rng.random_range(0..config.users);
            let context = context_for(user, &mut history, target);
            let mut view = vec![(target, 1u8, 1u8)];
            let siblings: Vec<ItemId> = by_category[cat as usize - 1].iter().copied().filter(|&i| i != target).collect();
            view.push((siblings[rng.random_range(0..siblings.len())], 1, 0));
            while view.len() < 2 + config.negatives_per_view {
                let other = ItemId(rng.random_range(0..config.items) as u64 + 1);
                let other_cat = catalog.get(other).expect("generated id").category_path[0];
                if other_cat != cat && view.iter().all(|v| v.0 != other) {
                    view.push((other, 0, 0));
                }
            }
            for (k, (item, relevance, click)) in view.into_iter().enumerate() {
                train.push(DatasetRow {
                    user_id: format!("user{user}"),
                    query: query.clone(),
                    context: context.clone(),
                    target_item: item,
                    relevance,
                    click,
                    timestamp: ts + k as u64,
                });
            }
        }
        ts += 3600;
        let user = rng.random_range(0..config.users);
        test.push(DatasetRow {
            user_id: format!("user{user}"),
            query,
            context: context_for(user, &mut history, target),
            target_item: target,
            relevance: 1,
            click: 1,
            timestamp: ts,
        });
    }
    for (n, &t) in targets.iter().skip(config.train_queries).take(config.novel_queries).enumerate() {
        ts += 3600;
        let target = ItemId(t as u64 + 1);
        let cat = category_of(t, config.categories);
        let user = rng.random_range(0..config.users);
        test.push(DatasetRow {
            user_id: format!("user{user}"),
            query: query_text(cat, &format!("novel{n}")),
            context: context_for(user, &mut history, target),
            target_item: target,
            relevance: 1,
            click: 1,
            timestamp: ts,
        });
    }

    let mut pairs = Vec::new();
    for a in 1..=config.categories as u32 {
        for b in a + 1..=config.categories as u32 {
            if group_of(a, config.groups) == group_of(b, config.groups) {
                pairs.push((a, b, 0.8));
            }
        }
    }
    let categories = (1..=config.categories as u32)
        .map(|c| CategoryRecord {
            category_id: c,
            parent_id: None,
            name: format!("cat{c}"),
        })
        .collect();
    Ok(SynthCorpus {
        catalog,
        categories,
        train,
        test,
        relevance: RelevanceOracle::new(pairs)?,
    })
}

impl SynthCorpus {
    /// Writes the corpus files into `dir` (created if missing).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.catalog.save(&dir.join(CATALOG_FILE))?;
        write_jsonl(&dir.join(CATEGORIES_FILE), &self.categories)?;
        save_dataset(&dir.join(TRAIN_FILE), &self.train, DatasetFormat::Jsonl)?;
        save_dataset(&dir.join(TEST_FILE), &self.test, DatasetFormat::Jsonl)?;
        self.relevance.save(&dir.join(RELEVANCE_FILE))
    }
}
