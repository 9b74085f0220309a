//! Bundle splits: plain ratio partitions and the cold setting where test
//! items never appear in training bundles.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{Error, Result};
use crate::rng::substream;

pub const SPLITS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Random,
    Cold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub schema_version: u32,
    pub mode: SplitMode,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
    /// Bundles discarded to enforce cold-item disjointness.
    pub dropped: usize,
}

impl Splits {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Splits> {
        let text = fs::read_to_string(path)?;
        let splits: Splits = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Ok(splits)
    }

    pub fn part(&self, name: &str) -> Option<&[u32]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn item_set(world: &World, bundles: &[u32]) -> BTreeSet<u32> {
    bundles
        .iter()
        .flat_map(|&b| world.bundles[b as usize].iter().copied())
        .collect()
}

/// Largest-remainder apportionment of `total` into three parts.
fn apportion(total: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let mut counts = [0usize; 3];
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(3);
    let mut assigned = 0usize;
    for k in 0..3 {
        let exact = r[k] * total as f64;
        counts[k] = exact.floor() as usize;
        assigned += counts[k];
        fracs.push((k, exact - exact.floor()));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (k, _) in fracs.into_iter().take(total - assigned) {
        counts[k] += 1;
    }
    counts
}

pub fn split_bundles(
    world: &World,
    ratios: (f64, f64, f64),
    mode: SplitMode,
    seed: u64,
) -> Result<Splits> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 {
        return Err(Error::Config(format!("ratios must be positive: {ratios:?}")));
    }
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "ratios must sum to 1, got {}",
            rt + rv + rs
        )));
    }

    let mut order: Vec<u32> = (0..world.bundles.len() as u32).collect();
    let mut rng = substream(seed, "split");
    order.shuffle(&mut rng);

    let counts = apportion(order.len(), ratios);
    let train: Vec<u32> = order[..counts[0]].to_vec();
    let valid: Vec<u32> = order[counts[0]..counts[0] + counts[1]].to_vec();
    let test: Vec<u32> = order[counts[0] + counts[1]..].to_vec();

    match mode {
        SplitMode::Random => Ok(Splits {
            schema_version: SPLITS_SCHEMA_VERSION,
            mode,
            train,
            valid,
            test,
            dropped: 0,
        }),
        SplitMode::Cold => {
            // Test bundles stay; any train/valid bundle touching a test item
            // is dropped outright (bundles are never mutated).
            let test_items = item_set(world, &test);
            let keep = |ids: &[u32]| -> (Vec<u32>, usize) {
                let mut kept = Vec::new();
                let mut dropped = 0;
                for &b in ids {
                    if world.bundles[b as usize]
                        .iter()
                        .any(|i| test_items.contains(i))
                    {
                        dropped += 1;
                    } else {
                        kept.push(b);
                    }
                }
                (kept, dropped)
            };
            let (train, d1) = keep(&train);
            let (valid, d2) = keep(&valid);
            if train.is_empty() {
                return Err(Error::Infeasible(format!(
                    "cold split dropped every training bundle: all {} candidate \
                     training bundles share items with the {} test bundles",
                    d1, test.len()
                )));
            }
            if test.is_empty() {
                return Err(Error::Infeasible("cold split has no test bundles".into()));
            }
            let splits = Splits {
                schema_version: SPLITS_SCHEMA_VERSION,
                mode,
                train,
                valid,
                test,
                dropped: d1 + d2,
            };
            let train_items = item_set(world, &splits.train);
            debug_assert!(train_items.is_disjoint(&test_items));
            Ok(splits)
        }
    }
}
