//! Per-item dense feature tables, one per modality, with the line-oriented
//! file format shared by the relational exporter and the CLI.
//!
//! Format: line 1 is `id,dim=<d>`; each following line is
//! `item_id,v1,...,vd` with floats at full round-trip precision.

use std::fs;
use std::path::Path;

use crate::checkpoint::fmt_f64;
use crate::dataset::World;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    /// Row index equals item id.
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn zeros(n_items: usize, dim: usize) -> Self {
        FeatureTable {
            dim,
            rows: vec![vec![0.0; dim]; n_items],
        }
    }

    pub fn row(&self, item_id: u32) -> Result<&[f64]> {
        self.rows
            .get(item_id as usize)
            .map(|r| r.as_slice())
            .ok_or_else(|| Error::Data(format!("no feature row for item {item_id}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("id,dim={}\n", self.dim));
        for (id, row) in self.rows.iter().enumerate() {
            out.push_str(&id.to_string());
            for v in row {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureTable> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?;
        let dim: usize = header
            .strip_prefix("id,dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| {
                Error::Parse(format!(
                    "{}: line 1: expected `id,dim=<d>`, got {header:?}",
                    path.display()
                ))
            })?;
        let mut rows = Vec::new();
        for (no, line) in lines.enumerate() {
            let mut parts = line.split(',');
            let id: usize = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| {
                    Error::Parse(format!("{}: line {}: bad item id", path.display(), no + 2))
                })?;
            if id != rows.len() {
                return Err(Error::Parse(format!(
                    "{}: line {}: item id {id} out of order (expected {})",
                    path.display(),
                    no + 2,
                    rows.len()
                )));
            }
            let row: Vec<f64> = parts
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::Parse(format!(
                            "{}: line {}: bad float {t:?}",
                            path.display(),
                            no + 2
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if row.len() != dim {
                return Err(Error::Parse(format!(
                    "{}: line {}: {} values, expected {dim}",
                    path.display(),
                    no + 2,
                    row.len()
                )));
            }
            rows.push(row);
        }
        Ok(FeatureTable { dim, rows })
    }
}

/// Media features come straight from the world's item records.
pub fn media_table(world: &World) -> FeatureTable {
    FeatureTable {
        dim: world.gen_config.d_m,
        rows: world.items.iter().map(|it| it.media_vec.clone()).collect(),
    }
}

/// The three non-textual feature tables a hybrid prompt can draw on.
#[derive(Debug, Clone)]
pub struct ModalityTables {
    pub media: FeatureTable,
    pub user_level: FeatureTable,
    pub bundle_level: FeatureTable,
}

impl ModalityTables {
    pub fn table(&self, modality: Modality) -> &FeatureTable {
        match modality {
            Modality::Media => &self.media,
            Modality::UserLevel => &self.user_level,
            Modality::BundleLevel => &self.bundle_level,
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Media,
    UserLevel,
    BundleLevel,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Media, Modality::UserLevel, Modality::BundleLevel];

    pub fn short_name(self) -> &'static str {
        match self {
            Modality::Media => "media",
            Modality::UserLevel => "ui",
            Modality::BundleLevel => "bi",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Modality> {
        match s {
            "media" => Some(Modality::Media),
            "ui" => Some(Modality::UserLevel),
            "bi" => Some(Modality::BundleLevel),
            _ => None,
        }
    }
}
