//! Saving and loading model artifacts between pipeline commands. Each
//! checkpoint travels with a JSON sidecar describing its shapes, so loads
//! reconstruct the exact parameter layout before filling in values.

use std::path::Path;

use anyhow::{bail, Context, Result};

use bundle_forge_core::checkpoint;
use bundle_forge_core::features::{media_table, FeatureTable, ModalityTables};
use bundle_forge_core::fusion::{FusionConfig, FusionParams};
use bundle_forge_core::dataset::World;
use bundle_forge_core::rng::substream;
use bundle_forge_core::tinylm::{
    BaseLm, LmConfig, LoraAdapters, LoraConfig, SoftSeparator, Vocabulary,
};
use bundle_forge_core::training::ThetaF;

pub const BASE_CKPT: &str = "base_lm.ckpt";
pub const LM_CONFIG: &str = "lm_config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const ADAPTERS_CKPT: &str = "adapters.ckpt";
pub const LORA_CONFIG: &str = "lora_config.json";
pub const THETA_CKPT: &str = "theta_f.ckpt";
pub const FUSION_CONFIG: &str = "fusion_config.json";
pub const UI_FEATURES: &str = "ui_features.csv";
pub const BI_FEATURES: &str = "bi_features.csv";

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn save_pretrained(dir: &Path, lm: &BaseLm, vocab: &Vocabulary) -> Result<()> {
    write_json(&dir.join(LM_CONFIG), &lm.config)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    checkpoint::save(&lm.params, &dir.join(BASE_CKPT))?;
    Ok(())
}

/// The frozen backbone plus its vocabulary. Missing files surface as
/// dependency errors naming what is absent.
pub fn load_pretrained(dir: &Path) -> Result<(BaseLm, Vocabulary)> {
    let config_path = dir.join(LM_CONFIG);
    if !config_path.exists() {
        bail!(
            "dependency error: {} has no {LM_CONFIG}; run `bundle-forge pretrain` first",
            dir.display()
        );
    }
    let config: LmConfig = read_json(&config_path)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let mut rng = substream(0, "artifact_placeholder");
    let mut lm = BaseLm::init(config, &mut rng)?;
    checkpoint::load_into(&mut lm.params, &dir.join(BASE_CKPT))?;
    lm.freeze();
    Ok((lm, vocab))
}

pub fn save_adapters(dir: &Path, adapters: &LoraAdapters) -> Result<()> {
    write_json(&dir.join(LORA_CONFIG), &adapters.config)?;
    checkpoint::save(adapters, &dir.join(ADAPTERS_CKPT))?;
    Ok(())
}

pub fn load_adapters(dir: &Path, lm: &LmConfig) -> Result<LoraAdapters> {
    let config_path = dir.join(LORA_CONFIG);
    if !config_path.exists() {
        bail!(
            "dependency error: {} has no {LORA_CONFIG}; run `bundle-forge train --stage s1` first",
            dir.display()
        );
    }
    let config: LoraConfig = read_json(&config_path)?;
    let mut rng = substream(0, "artifact_placeholder");
    let mut adapters = LoraAdapters::init(lm, config, &mut rng)?;
    checkpoint::load_into(&mut adapters, &dir.join(ADAPTERS_CKPT))?;
    Ok(adapters)
}

pub fn save_theta(dir: &Path, theta: &ThetaF) -> Result<()> {
    write_json(&dir.join(FUSION_CONFIG), &theta.fusion.config)?;
    checkpoint::save(theta, &dir.join(THETA_CKPT))?;
    Ok(())
}

pub fn load_theta(dir: &Path, d_lm: usize) -> Result<ThetaF> {
    let config_path = dir.join(FUSION_CONFIG);
    if !config_path.exists() {
        bail!(
            "dependency error: {} has no {FUSION_CONFIG}",
            dir.display()
        );
    }
    let config: FusionConfig = read_json(&config_path)?;
    let mut rng = substream(0, "artifact_placeholder");
    let mut theta = ThetaF {
        fusion: FusionParams::init(config, &mut rng),
        separator: SoftSeparator::init(d_lm, &mut rng),
    };
    checkpoint::load_into(&mut theta, &dir.join(THETA_CKPT))?;
    Ok(theta)
}

/// A staged model directory holds both trainable groups.
pub fn save_model_dir(dir: &Path, adapters: &LoraAdapters, theta: &ThetaF) -> Result<()> {
    save_adapters(dir, adapters)?;
    save_theta(dir, theta)?;
    Ok(())
}

pub fn load_model_dir(dir: &Path, lm: &LmConfig) -> Result<(LoraAdapters, ThetaF)> {
    Ok((load_adapters(dir, lm)?, load_theta(dir, lm.d_model)?))
}

/// Relational feature tables from `train-relational` plus media features
/// straight from the world.
pub fn load_tables(features_dir: &Path, world: &World) -> Result<ModalityTables> {
    let ui = features_dir.join(UI_FEATURES);
    let bi = features_dir.join(BI_FEATURES);
    if !ui.exists() || !bi.exists() {
        bail!(
            "dependency error: {} is missing feature tables; run `bundle-forge train-relational` first",
            features_dir.display()
        );
    }
    Ok(ModalityTables {
        media: media_table(world),
        user_level: FeatureTable::load(&ui)?,
        bundle_level: FeatureTable::load(&bi)?,
    })
}

/// Zero-filled relational tables for text-only or media-only pipelines
/// that never touch relational features.
pub fn placeholder_tables(world: &World, dim: usize) -> ModalityTables {
    ModalityTables {
        media: media_table(world),
        user_level: FeatureTable::zeros(world.n_items(), dim),
        bundle_level: FeatureTable::zeros(world.n_items(), dim),
    }
}
