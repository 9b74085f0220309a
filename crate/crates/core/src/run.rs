//! Run manifests and run-directory layout.
//!
//! Every command writes its artifacts into a run directory with a fixed
//! layout: `config.json` (the effective merged config), `losses.csv`
//! (step, stage, loss, lr), stage checkpoints, and `report.json`. Reports
//! embed the manifest, and identical manifests reproduce byte-identical
//! artifacts; wall-clock timings go to a separate `timing.txt` so they
//! never break that contract.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::fmt_f64;
use crate::error::{Error, Result};
use crate::prompting::{template_hash, TEMPLATE_VERSION};
use crate::training::StageReport;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_hash: String,
    pub master_seed: u64,
    pub template_version: String,
    pub template_hash: String,
    pub artifact_versions: ArtifactVersions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactVersions {
    pub world_schema: u32,
    pub report_schema: u32,
    pub checkpoint_format: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config_json: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            config_hash: sha256_hex(config_json.as_bytes()),
            master_seed: seed,
            template_version: TEMPLATE_VERSION.to_string(),
            template_hash: template_hash(),
            artifact_versions: ArtifactVersions {
                world_schema: crate::dataset::WORLD_SCHEMA_VERSION,
                report_schema: REPORT_SCHEMA_VERSION,
                checkpoint_format: crate::checkpoint::CHECKPOINT_MAGIC.to_string(),
            },
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Resolve the output directory: an explicit path must not already exist
/// unless `force`; without one, a timestamped directory is created under
/// the artifact root (`BUNDLE_FORGE_DIR` or `./runs`).
pub fn resolve_out_dir(explicit: Option<&Path>, command: &str, force: bool) -> Result<PathBuf> {
    match explicit {
        Some(path) => {
            if path.exists() && !force {
                return Err(Error::Config(format!(
                    "output directory {} exists; pass --force to reuse it",
                    path.display()
                )));
            }
            fs::create_dir_all(path)?;
            Ok(path.to_path_buf())
        }
        None => {
            let root = std::env::var_os("BUNDLE_FORGE_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_err(|e| Error::Config(format!("clock error: {e}")))?
                .as_secs();
            let mut n = 0u32;
            loop {
                let dir = root.join(format!("run-{stamp}-{command}{}", suffix(n)));
                if !dir.exists() {
                    fs::create_dir_all(&dir)?;
                    return Ok(dir);
                }
                n += 1;
            }
        }
    }
}

fn suffix(n: u32) -> String {
    if n == 0 {
        String::new()
    } else {
        format!("-{n}")
    }
}

/// `losses.csv`: one line per optimizer step.
pub fn write_losses_csv(dir: &Path, reports: &[&StageReport]) -> Result<()> {
    let mut out = String::from("step,stage,loss,lr\n");
    for report in reports {
        for p in &report.loss_trace {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.step,
                report.stage,
                fmt_f64(p.loss),
                fmt_f64(p.lr)
            ));
        }
    }
    fs::write(dir.join("losses.csv"), out)?;
    Ok(())
}

/// Deterministic JSON artifact: serialized value wrapped with its manifest.
pub fn write_report<T: Serialize>(dir: &Path, manifest: &RunManifest, body: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Report<'a, T> {
        schema_version: u32,
        manifest: &'a RunManifest,
        #[serde(flatten)]
        body: &'a T,
    }
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        manifest,
        body,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(dir.join("report.json"), text)?;
    Ok(())
}

/// Wall-clock timings live outside the deterministic report.
pub fn write_timing(dir: &Path, entries: &[(String, f64)]) -> Result<()> {
    let mut out = String::new();
    for (name, secs) in entries {
        out.push_str(&format!("{name}: {secs:.3}s\n"));
    }
    fs::write(dir.join("timing.txt"), out)?;
    Ok(())
}

pub fn write_config_echo<T: Serialize>(dir: &Path, config: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(dir.join("config.json"), &text)?;
    Ok(text)
}
