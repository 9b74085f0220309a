//! World generation with controllable learnability.
//!
//! Every bundle draws its items from one latent category. The learnability
//! mode decides which channel exposes that category: the item text, the
//! media vector, or only the co-occurrence structure.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use super::{GenConfig, ItemRecord, World, WORLD_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::rng::substream_indexed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnabilityMode {
    /// The category word appears in the item text.
    TextSufficient,
    /// The category is encoded in the media vector and withheld from text.
    MediaRequired,
    /// Neither text nor media carry the category; only bundle and user
    /// co-occurrence express it.
    RelationalRequired,
}

/// Closed word pools the generator composes item titles from. The training
/// corpus is built from the same pools, so generated text never tokenizes
/// to UNK.
pub struct WordPools {
    pub colors: &'static [&'static str],
    pub materials: &'static [&'static str],
    pub category_nouns: &'static [&'static str],
    pub style_adjectives: &'static [&'static str],
    pub fillers: &'static [&'static str],
}

impl WordPools {
    /// Every word the generator can emit, for closed-vocabulary builds.
    pub fn all_words(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        out.extend_from_slice(self.colors);
        out.extend_from_slice(self.materials);
        out.extend_from_slice(self.category_nouns);
        out.extend_from_slice(self.style_adjectives);
        out.extend_from_slice(self.fillers);
        out
    }
}

pub const WORD_POOLS: WordPools = WordPools {
    colors: &[
        "red", "blue", "green", "black", "white", "amber", "coral", "crimson", "teal", "olive",
        "navy", "ivory", "slate", "plum", "gold", "silver", "maroon", "beige", "cyan", "indigo",
        "lilac", "peach", "rust", "jade",
    ],
    materials: &[
        "wool", "cotton", "leather", "silk", "denim", "linen", "velvet", "suede", "canvas",
        "satin", "fleece", "tweed", "mesh", "nylon", "cashmere", "corduroy",
    ],
    category_nouns: &[
        "coat", "boot", "scarf", "hat", "belt", "glove", "jacket", "sneaker", "dress", "skirt",
        "sweater", "sandal", "watch", "bag", "sock", "shirt",
    ],
    style_adjectives: &[
        "classic", "sporty", "vintage", "modern", "rustic", "formal", "casual", "bold",
    ],
    fillers: &[
        "soft", "warm", "light", "sturdy", "sleek", "cozy", "plain", "fine", "smooth", "bright",
        "quiet", "neat", "fresh", "calm", "crisp", "mild", "deep", "pale", "clean", "clear",
        "spare", "trim", "keen", "worn",
    ],
};

fn check_config(cfg: &GenConfig) -> Result<()> {
    if cfg.n_items < 20 {
        return Err(Error::Config(format!("n_items {} < 20", cfg.n_items)));
    }
    if cfg.n_bundles < 10 {
        return Err(Error::Config(format!("n_bundles {} < 10", cfg.n_bundles)));
    }
    if cfg.n_users == 0 {
        return Err(Error::Config("n_users must be >= 1".into()));
    }
    if cfg.n_categories < 2 {
        return Err(Error::Config(format!(
            "n_categories {} < 2",
            cfg.n_categories
        )));
    }
    if cfg.n_categories > WORD_POOLS.category_nouns.len() {
        return Err(Error::Config(format!(
            "n_categories {} exceeds the noun pool ({})",
            cfg.n_categories,
            WORD_POOLS.category_nouns.len()
        )));
    }
    if cfg.n_styles == 0 || cfg.n_styles > WORD_POOLS.style_adjectives.len() {
        return Err(Error::Config(format!(
            "n_styles {} outside 1..={}",
            cfg.n_styles,
            WORD_POOLS.style_adjectives.len()
        )));
    }
    if cfg.d_m < 2 {
        return Err(Error::Config(format!("d_m {} < 2", cfg.d_m)));
    }
    if cfg.min_bundle_size < 2 {
        return Err(Error::Config("min_bundle_size must be >= 2".into()));
    }
    if cfg.mean_bundle_size < cfg.min_bundle_size as f64 {
        return Err(Error::Config(format!(
            "mean_bundle_size {} below min_bundle_size {}",
            cfg.mean_bundle_size, cfg.min_bundle_size
        )));
    }
    let per_category = cfg.n_items / cfg.n_categories;
    if per_category < cfg.min_bundle_size {
        return Err(Error::Config(format!(
            "only {per_category} items per category, bundles need at least {}",
            cfg.min_bundle_size
        )));
    }
    Ok(())
}

/// Deterministic unit direction in R^{d_m} for a latent attribute value.
fn attribute_direction(seed: u64, tag: &str, value: u32, d_m: usize) -> Vec<f64> {
    let mut rng = substream_indexed(seed, tag, value as u64);
    let mut v: Vec<f64> = (0..d_m)
        .map(|_| {
            // Box-Muller keeps this independent of distribution-crate details.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub fn generate_world(config: &GenConfig, seed: u64) -> Result<World> {
    check_config(config)?;
    let cfg = config.clone();

    let category_dirs: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|c| attribute_direction(seed, "world.media_cat", c as u32, cfg.d_m))
        .collect();
    let style_dirs: Vec<Vec<f64>> = (0..cfg.n_styles)
        .map(|s| attribute_direction(seed, "world.media_style", s as u32, cfg.d_m))
        .collect();

    let mut items = Vec::with_capacity(cfg.n_items);
    for id in 0..cfg.n_items {
        let mut rng = substream_indexed(seed, "world.item", id as u64);
        let category = (id % cfg.n_categories) as u32;
        let style = ((id / cfg.n_categories) % cfg.n_styles) as u32;
        let color = WORD_POOLS.colors.choose(&mut rng).unwrap();
        let material = WORD_POOLS.materials.choose(&mut rng).unwrap();
        let filler = WORD_POOLS.fillers.choose(&mut rng).unwrap();
        let text = match cfg.learnability_mode {
            LearnabilityMode::TextSufficient => format!(
                "{} {} {}",
                WORD_POOLS.category_nouns[category as usize],
                color,
                material,
            ),
            LearnabilityMode::MediaRequired | LearnabilityMode::RelationalRequired => {
                format!("{color} {material} {filler}")
            }
        };
        let media_vec: Vec<f64> = (0..cfg.d_m)
            .map(|k| {
                let noise: f64 = rng.gen_range(-0.3..0.3);
                match cfg.learnability_mode {
                    LearnabilityMode::RelationalRequired => noise,
                    _ => {
                        2.0 * category_dirs[category as usize][k]
                            + style_dirs[style as usize][k]
                            + noise
                    }
                }
            })
            .collect();
        items.push(ItemRecord {
            item_id: id as u32,
            text,
            media_vec,
            latent_category: category,
            latent_style: style,
        });
    }

    let by_category: Vec<Vec<u32>> = (0..cfg.n_categories)
        .map(|c| {
            items
                .iter()
                .filter(|it| it.latent_category == c as u32)
                .map(|it| it.item_id)
                .collect()
        })
        .collect();

    let extra_mean = cfg.mean_bundle_size - cfg.min_bundle_size as f64;
    let mut bundles = Vec::with_capacity(cfg.n_bundles);
    for b in 0..cfg.n_bundles {
        let mut rng = substream_indexed(seed, "world.bundle", b as u64);
        let category = rng.gen_range(0..cfg.n_categories);
        let pool = &by_category[category];
        let extra = if extra_mean > 0.0 {
            Poisson::new(extra_mean).unwrap().sample(&mut rng) as usize
        } else {
            0
        };
        let size = (cfg.min_bundle_size + extra).min(pool.len());
        let mut members: Vec<u32> =
            rand::seq::index::sample(&mut rng, pool.len(), size)
                .iter()
                .map(|k| pool[k])
                .collect();
        members.sort_unstable();
        bundles.push(members);
    }

    let mut ui_edges = Vec::new();
    for u in 0..cfg.n_users {
        let mut rng = substream_indexed(seed, "world.user", u as u64);
        let preferred = u % cfg.n_categories;
        let mut seen = BTreeSet::new();
        for _ in 0..cfg.interactions_per_user {
            let item = if rng.gen_bool(0.8) {
                let pool = &by_category[preferred];
                pool[rng.gen_range(0..pool.len())]
            } else {
                rng.gen_range(0..cfg.n_items) as u32
            };
            seen.insert(item);
        }
        for item in seen {
            ui_edges.push((u as u32, item));
        }
    }

    let world = World {
        schema_version: WORLD_SCHEMA_VERSION,
        gen_config: cfg,
        seed,
        items,
        bundles,
        ui_edges,
        users: config.n_users,
    };
    super::validate_world(&world)?;
    Ok(world)
}
