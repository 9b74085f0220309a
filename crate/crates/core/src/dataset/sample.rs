//! Prompt-instance sampling: seed items, one positive, uniform negatives.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{PromptInstance, World};
use crate::error::{Error, Result};
use crate::rng::{substream_indexed, Rng};

/// Half the bundle, at least one item.
pub fn default_n_seed(bundle_len: usize) -> usize {
    (bundle_len / 2).max(1)
}

pub fn sample_prompt_instance(
    bundle_id: u32,
    world: &World,
    n_seed: usize,
    n_candidates: usize,
    rng: &mut Rng,
) -> Result<PromptInstance> {
    let bundle = world
        .bundles
        .get(bundle_id as usize)
        .ok_or_else(|| Error::Sampling(format!("bundle {bundle_id} does not exist")))?;
    if n_seed == 0 {
        return Err(Error::Sampling("n_seed must be >= 1".into()));
    }
    if bundle.len() <= n_seed {
        return Err(Error::Sampling(format!(
            "bundle {bundle_id} has {} items; need more than n_seed = {n_seed}",
            bundle.len()
        )));
    }
    if n_candidates < 2 {
        return Err(Error::Sampling("n_candidates must be >= 2".into()));
    }
    let n_negatives = n_candidates - 1;
    let n_nonmembers = world.n_items() - bundle.len();
    if n_nonmembers < n_negatives {
        return Err(Error::Sampling(format!(
            "need {n_negatives} negatives but only {n_nonmembers} non-member items exist"
        )));
    }

    let mut members = bundle.clone();
    members.shuffle(rng);
    let seed_items: Vec<u32> = members[..n_seed].to_vec();
    let positive = members[n_seed + rng.gen_range(0..members.len() - n_seed)];

    let in_bundle: std::collections::BTreeSet<u32> = bundle.iter().copied().collect();
    let nonmembers: Vec<u32> = (0..world.n_items() as u32)
        .filter(|i| !in_bundle.contains(i))
        .collect();
    let mut candidates: Vec<u32> = rand::seq::index::sample(rng, nonmembers.len(), n_negatives)
        .iter()
        .map(|k| nonmembers[k])
        .collect();
    let positive_index = rng.gen_range(0..n_candidates);
    candidates.insert(positive_index, positive);

    Ok(PromptInstance {
        seed_items,
        candidates,
        positive_index,
        bundle_id,
    })
}

/// Instance with an RNG derived from `(seed, bundle, draw)`. Candidate-size
/// sweeps reuse the same derivation so seed items and the positive stay
/// fixed while only the candidate count changes.
pub fn sample_instance_for(
    bundle_id: u32,
    draw: u64,
    world: &World,
    n_seed: usize,
    n_candidates: usize,
    seed: u64,
) -> Result<PromptInstance> {
    let mut rng = substream_indexed(seed, "instance", ((bundle_id as u64) << 24) | draw);
    sample_prompt_instance(bundle_id, world, n_seed, n_candidates, &mut rng)
}

/// `count` instances cycling over `bundle_ids`, skipping bundles that are
/// too small to seed or worlds too small for the negative draw.
/// Deterministic in `(seed, bundle, draw)`.
pub fn sample_instances(
    world: &World,
    bundle_ids: &[u32],
    n_candidates: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PromptInstance>> {
    if bundle_ids.is_empty() {
        return Err(Error::Sampling("no bundles to sample from".into()));
    }
    let mut out = Vec::with_capacity(count);
    let max_rounds = 2 + (count * 4) / bundle_ids.len().max(1);
    let mut draw = 0u64;
    while out.len() < count && (draw as usize) < max_rounds {
        for &b in bundle_ids {
            if out.len() >= count {
                break;
            }
            let len = world.bundles[b as usize].len();
            if len < 2 {
                continue;
            }
            let n_seed = default_n_seed(len);
            match sample_instance_for(b, draw, world, n_seed, n_candidates, seed) {
                Ok(inst) => out.push(inst),
                Err(Error::Sampling(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        draw += 1;
    }
    if out.is_empty() {
        return Err(Error::Sampling(
            "could not sample any instances from the given bundles".into(),
        ));
    }
    Ok(out)
}
