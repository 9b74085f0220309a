//! Synthetic bundle worlds: generation, validation, persistence, splits,
//! and prompt-instance sampling.

mod generate;
mod sample;
mod split;

pub use generate::{generate_world, LearnabilityMode, WORD_POOLS};
pub use sample::{default_n_seed, sample_instance_for, sample_instances, sample_prompt_instance};
pub use split::{split_bundles, SplitMode, Splits};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WORLD_SCHEMA_VERSION: u32 = 1;

/// Generation knobs. Serialized into the world file so a world is always
/// reproducible from its own header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_items: usize,
    pub n_bundles: usize,
    pub n_users: usize,
    pub n_categories: usize,
    pub n_styles: usize,
    /// Media feature dimension.
    pub d_m: usize,
    pub mean_bundle_size: f64,
    pub min_bundle_size: usize,
    pub interactions_per_user: usize,
    pub learnability_mode: LearnabilityMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_items: 200,
            n_bundles: 600,
            n_users: 100,
            n_categories: 10,
            n_styles: 4,
            d_m: 16,
            mean_bundle_size: 3.6,
            min_bundle_size: 3,
            interactions_per_user: 20,
            learnability_mode: LearnabilityMode::TextSufficient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u32,
    pub text: String,
    pub media_vec: Vec<f64>,
    pub latent_category: u32,
    pub latent_style: u32,
}

/// A full synthetic world. Bundle-item affiliations are derived from
/// `bundles`, never stored separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub schema_version: u32,
    pub gen_config: GenConfig,
    pub seed: u64,
    pub items: Vec<ItemRecord>,
    /// Each bundle is a sorted list of distinct item ids.
    pub bundles: Vec<Vec<u32>>,
    pub ui_edges: Vec<(u32, u32)>,
    pub users: usize,
}

impl World {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Flattening of `bundles` into (bundle_id, item_id) pairs.
    pub fn bi_edges(&self) -> Vec<(u32, u32)> {
        let mut edges = Vec::new();
        for (b, items) in self.bundles.iter().enumerate() {
            for &i in items {
                edges.push((b as u32, i));
            }
        }
        edges
    }

    pub fn bi_edges_for(&self, bundle_ids: &[u32]) -> Vec<(u32, u32)> {
        let mut edges = Vec::new();
        for &b in bundle_ids {
            for &i in &self.bundles[b as usize] {
                edges.push((b, i));
            }
        }
        edges
    }

    pub fn item(&self, id: u32) -> &ItemRecord {
        &self.items[id as usize]
    }
}

/// Check every structural invariant of a world. Run after generation and
/// after loading from disk.
pub fn validate_world(world: &World) -> Result<()> {
    let cfg = &world.gen_config;
    let n = world.items.len();
    for (idx, item) in world.items.iter().enumerate() {
        if item.item_id as usize != idx {
            return Err(Error::Validation(format!(
                "item at position {idx} has id {}; ids must be dense and ordered",
                item.item_id
            )));
        }
        if item.text.trim().is_empty() {
            return Err(Error::Validation(format!("item {idx} has empty text")));
        }
        if item.media_vec.len() != cfg.d_m {
            return Err(Error::Validation(format!(
                "item {idx} media_vec has {} entries, expected {}",
                item.media_vec.len(),
                cfg.d_m
            )));
        }
        if !item.media_vec.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "item {idx} media_vec contains a non-finite entry"
            )));
        }
    }
    for (b, bundle) in world.bundles.iter().enumerate() {
        if bundle.len() < cfg.min_bundle_size {
            return Err(Error::Validation(format!(
                "bundle {b} has {} items, minimum is {}",
                bundle.len(),
                cfg.min_bundle_size
            )));
        }
        let mut seen = BTreeSet::new();
        for &i in bundle {
            if i as usize >= n {
                return Err(Error::Validation(format!(
                    "bundle {b} references missing item {i}"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Validation(format!(
                    "bundle {b} contains item {i} twice"
                )));
            }
        }
    }
    let mut seen_edges = BTreeSet::new();
    for &(u, i) in &world.ui_edges {
        if u as usize >= world.users {
            return Err(Error::Validation(format!(
                "edge ({u}, {i}) references missing user {u}"
            )));
        }
        if i as usize >= n {
            return Err(Error::Validation(format!(
                "edge ({u}, {i}) references missing item {i}"
            )));
        }
        if !seen_edges.insert((u, i)) {
            return Err(Error::Validation(format!("duplicate edge ({u}, {i})")));
        }
    }
    Ok(())
}

pub fn save_world(world: &World, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(world)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    let text = fs::read_to_string(path)?;
    let world: World = serde_json::from_str(&text).map_err(|e| {
        Error::Parse(format!(
            "{}: line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    if world.schema_version != WORLD_SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported schema_version {}",
            path.display(),
            world.schema_version
        )));
    }
    validate_world(&world)?;
    Ok(world)
}

/// One multiple-choice query: revealed seed items, a lettered candidate
/// list containing exactly one true member, and where that member sits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub seed_items: Vec<u32>,
    pub candidates: Vec<u32>,
    pub positive_index: usize,
    pub bundle_id: u32,
}
