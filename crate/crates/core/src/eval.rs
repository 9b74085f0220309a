//! HitRate@1 / ValidRatio evaluation over prompt instances, candidate-size
//! sweeps, and reference baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_instances, PromptInstance, World};
use crate::error::{Error, Result};
use crate::features::{FeatureTable, ModalityTables};
use crate::fusion::FusionParams;
use crate::linalg::dot;
use crate::prompting::{
    build_plan, materialize, parse_answer, MaterializeCtx, PromptMode,
};
use crate::rng::substream_indexed;
use crate::tinylm::{generate_answer, BaseLm, LoraAdapters, SoftSeparator, Vocabulary};

/// Outcome for one instance. `predicted` is `None` when the output did not
/// parse to an in-range option letter (INVALID).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub bundle_id: u32,
    pub predicted: Option<usize>,
    pub positive_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hit_rate_at_1: f64,
    pub valid_ratio: f64,
    pub n_instances: usize,
    pub records: Vec<InstanceRecord>,
}

impl Metrics {
    /// Recompute the headline numbers from the record list; the stored
    /// values must always match this.
    pub fn from_records(records: Vec<InstanceRecord>) -> Result<Metrics> {
        if records.is_empty() {
            return Err(Error::Data("no instances to evaluate".into()));
        }
        let n = records.len();
        let valid = records.iter().filter(|r| r.predicted.is_some()).count();
        let hits = records
            .iter()
            .filter(|r| r.predicted == Some(r.positive_index))
            .count();
        Ok(Metrics {
            hit_rate_at_1: hits as f64 / n as f64,
            valid_ratio: valid as f64 / n as f64,
            n_instances: n,
            records,
        })
    }
}

/// A prediction is either raw model text (parsed by the harness) or a
/// direct candidate index from a scoring baseline.
pub enum Prediction {
    Text(String),
    Index(usize),
}

pub trait InstancePredictor: Sync {
    /// `idx` is the instance's position in the evaluation list, so
    /// stochastic predictors can derive a per-instance stream.
    fn predict(&self, idx: usize, instance: &PromptInstance) -> Result<Prediction>;
}

pub fn evaluate<P: InstancePredictor>(
    predictor: &P,
    instances: &[PromptInstance],
) -> Result<Metrics> {
    if instances.is_empty() {
        return Err(Error::Data("no instances to evaluate".into()));
    }
    let records: Vec<InstanceRecord> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| -> Result<InstanceRecord> {
            let predicted = match predictor.predict(idx, inst)? {
                Prediction::Text(text) => parse_answer(&text, inst.candidates.len()),
                Prediction::Index(i) => (i < inst.candidates.len()).then_some(i),
            };
            Ok(InstanceRecord {
                bundle_id: inst.bundle_id,
                predicted,
                positive_index: inst.positive_index,
            })
        })
        .collect::<Result<_>>()?;
    Metrics::from_records(records)
}

// ---------------------------------------------------------------------------
// Model predictor
// ---------------------------------------------------------------------------

pub struct ModelPredictor<'a> {
    pub world: &'a World,
    pub vocab: &'a Vocabulary,
    pub lm: &'a BaseLm,
    pub adapters: Option<&'a LoraAdapters>,
    pub fusion: &'a FusionParams,
    pub separator: &'a SoftSeparator,
    pub tables: &'a ModalityTables,
    pub mode: PromptMode,
    pub max_new_tokens: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn output_text(&self, instance: &PromptInstance) -> Result<String> {
        let plan = build_plan(
            instance,
            self.world,
            self.vocab,
            &self.mode,
            self.lm.config.context,
        )?;
        let ctx = MaterializeCtx {
            lm: self.lm,
            fusion: self.fusion,
            separator: self.separator,
            tables: self.tables,
            mask: self.mode.modalities,
        };
        let seq = materialize(&plan, &ctx)?;
        generate_answer(
            self.lm,
            self.vocab,
            &seq.embeddings,
            self.adapters,
            self.max_new_tokens,
        )
    }
}

impl<'a> InstancePredictor for ModelPredictor<'a> {
    fn predict(&self, _idx: usize, instance: &PromptInstance) -> Result<Prediction> {
        Ok(Prediction::Text(self.output_text(instance)?))
    }
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Uniform random choice, deterministic per (seed, instance index).
pub struct RandomBaseline {
    pub seed: u64,
}

impl InstancePredictor for RandomBaseline {
    fn predict(&self, idx: usize, instance: &PromptInstance) -> Result<Prediction> {
        use rand::Rng as _;
        let mut rng = substream_indexed(self.seed, "random_baseline", idx as u64);
        Ok(Prediction::Index(
            rng.gen_range(0..instance.candidates.len()),
        ))
    }
}

/// Always answers with the true option; protocol sanity check.
pub struct OracleBaseline;

impl InstancePredictor for OracleBaseline {
    fn predict(&self, _idx: usize, instance: &PromptInstance) -> Result<Prediction> {
        Ok(Prediction::Index(instance.positive_index))
    }
}

/// Scores each candidate by inner product with the mean of the seed items'
/// bundle-level feature vectors. Ties break to the lowest index.
pub struct DotProductBaseline<'a> {
    pub features: &'a FeatureTable,
}

impl<'a> DotProductBaseline<'a> {
    pub fn score(&self, instance: &PromptInstance) -> Result<Vec<f64>> {
        let dim = self.features.dim;
        let mut bundle_vec = vec![0.0; dim];
        for &s in &instance.seed_items {
            let row = self.features.row(s)?;
            for (b, &v) in bundle_vec.iter_mut().zip(row) {
                *b += v;
            }
        }
        let inv = 1.0 / instance.seed_items.len() as f64;
        bundle_vec.iter_mut().for_each(|v| *v *= inv);
        instance
            .candidates
            .iter()
            .map(|&c| Ok(dot(&bundle_vec, self.features.row(c)?)))
            .collect()
    }
}

impl<'a> InstancePredictor for DotProductBaseline<'a> {
    fn predict(&self, _idx: usize, instance: &PromptInstance) -> Result<Prediction> {
        let scores = self.score(instance)?;
        Ok(Prediction::Index(argmax_lowest(&scores)))
    }
}

/// Picks the candidate with the highest bundle-affiliation degree in the
/// training split; ties break to the lowest index.
pub struct PopularityBaseline {
    degrees: Vec<usize>,
}

impl PopularityBaseline {
    /// Degrees come from the given bundles only, so held-out bundles never
    /// leak into the score.
    pub fn from_training_split(world: &World, train_bundles: &[u32]) -> Self {
        let mut degrees = vec![0usize; world.n_items()];
        for &b in train_bundles {
            for &i in &world.bundles[b as usize] {
                degrees[i as usize] += 1;
            }
        }
        PopularityBaseline { degrees }
    }

    pub fn degree(&self, item: u32) -> usize {
        self.degrees[item as usize]
    }
}

impl InstancePredictor for PopularityBaseline {
    fn predict(&self, _idx: usize, instance: &PromptInstance) -> Result<Prediction> {
        let scores: Vec<f64> = instance
            .candidates
            .iter()
            .map(|&c| self.degrees[c as usize] as f64)
            .collect();
        Ok(Prediction::Index(argmax_lowest(&scores)))
    }
}

fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_candidates: usize,
    pub metrics: Metrics,
}

/// One metrics row per candidate-set size. Instance draws share the same
/// (seed, bundle, draw) streams, so seed items and positives line up across
/// sizes and only the candidate count varies.
pub fn candidate_size_sweep<P: InstancePredictor>(
    predictor: &P,
    world: &World,
    bundle_ids: &[u32],
    sizes: &[usize],
    count: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let instances = sample_instances(world, bundle_ids, size, count, seed)?;
        let metrics = evaluate(predictor, &instances)?;
        rows.push(SweepRow {
            n_candidates: size,
            metrics,
        });
    }
    Ok(rows)
}

pub const DEFAULT_SWEEP_SIZES: [usize; 4] = [2, 5, 10, 20];
