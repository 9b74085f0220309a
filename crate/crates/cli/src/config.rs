//! The JSON config file and flag merging. Every section has full defaults,
//! so a config file only lists what it changes; flags override file values
//! and the merged result is echoed into each run directory.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use bundle_forge_core::dataset::GenConfig;
use bundle_forge_core::optim::AdamConfig;
use bundle_forge_core::relational::RelationalHyper;
use bundle_forge_core::tinylm::PretrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub world: GenConfig,
    #[serde(default)]
    pub relational: RelationalSection,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelationalSection {
    pub dim: usize,
    pub k_layers: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub include_layer0: bool,
    pub init_sigma: f64,
}

impl Default for RelationalSection {
    fn default() -> Self {
        let h = RelationalHyper::default();
        RelationalSection {
            dim: h.dim,
            k_layers: h.k_layers,
            learning_rate: h.learning_rate,
            l2: h.l2,
            epochs: h.epochs,
            batch_size: h.batch_size,
            include_layer0: h.include_layer0,
            init_sigma: h.init_sigma,
        }
    }
}

impl RelationalSection {
    pub fn hyper(&self, seed: u64) -> RelationalHyper {
        RelationalHyper {
            dim: self.dim,
            k_layers: self.k_layers,
            learning_rate: self.learning_rate,
            l2: self.l2,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            include_layer0: self.include_layer0,
            init_sigma: self.init_sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_mult: usize,
    pub context: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            ff_mult: 4,
            context: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub heldout_frac: f64,
    /// Rendered multiple-choice examples mixed into the corpus.
    pub task_examples: usize,
    /// Candidate-count mixture for those examples.
    pub candidate_counts: Vec<usize>,
    pub min_word_freq: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            epochs: p.epochs,
            batch_size: p.batch_size,
            peak_lr: p.peak_lr,
            warmup_frac: p.warmup_frac,
            heldout_frac: p.heldout_frac,
            task_examples: 4096,
            candidate_counts: vec![2, 3, 5, 8, 10, 12],
            min_word_freq: 1,
        }
    }
}

impl PretrainSection {
    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            heldout_frac: self.heldout_frac,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub d: usize,
    pub d_hidden: usize,
    pub k_layers: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            d: 64,
            d_hidden: 64,
            k_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub sample_count: usize,
    pub valid_count: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub n_candidates: usize,
    pub patience: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            sample_count: 1024,
            valid_count: 128,
            batch_size: 16,
            max_epochs: 10,
            peak_lr: 3e-4,
            warmup_frac: 0.1,
            n_candidates: 10,
            patience: 3,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl TrainSection {
    pub fn train_config(
        &self,
        stage: bundle_forge_core::training::Stage,
        mode: bundle_forge_core::prompting::PromptMode,
        seed: u64,
    ) -> bundle_forge_core::training::TrainConfig {
        bundle_forge_core::training::TrainConfig {
            stage,
            mode,
            sample_count: self.sample_count,
            valid_count: self.valid_count,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            n_candidates: self.n_candidates,
            patience: self.patience,
            seed,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub count: usize,
    pub n_candidates: usize,
    pub sweep_sizes: Vec<usize>,
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            count: 1000,
            n_candidates: 10,
            sweep_sizes: vec![2, 5, 10, 20],
            max_new_tokens: 4,
        }
    }
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<AppConfig> {
    match path {
        None => Ok(AppConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let config: AppConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            Ok(config)
        }
    }
}
