//! Dataset manifest: a TOML document that names a container and groups its
//! rows into templates.
//!
//! ```toml
//! format_version = 1
//! d = 64
//! container = "synth.cnan"        # relative to the manifest's directory
//!
//! [[templates]]
//! template_id = "s0000-p0"
//! subject_id = "s0000"
//! distribution = "probe"          # or "gallery"
//! split = "train"                 # "train", "val" or "test"
//! rows = [0, 1, 2]
//! quality_hint = [1.0, 0.0, 1.0]  # optional, one per row
//! media_ids = ["a", "b", "c"]     # optional; default "<template_id>-mNN"
//! ```
//!
//! An optional `[config]` table echoes the settings that produced the data.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{EmbeddingContainer, FloatWidth};
use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::template::{Dataset, Distribution, Embedding, Split, Template};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub d: usize,
    pub container: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<toml::Table>,
    #[serde(default)]
    pub templates: Vec<ManifestTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTemplate {
    pub template_id: String,
    pub subject_id: String,
    pub distribution: Distribution,
    pub split: Split,
    pub rows: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_hint: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_ids: Option<Vec<String>>,
}

fn default_media_id(template: &str, k: usize) -> String {
    format!("{template}-m{k:02}")
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        // Check the version before the schema so that a future layout is
        // reported as such rather than as a pile of unknown fields.
        let loose: toml::Table = toml::from_str(text).map_err(|e| Error::Schema(format!("manifest: {e}")))?;
        match loose.get("format_version").and_then(toml::Value::as_integer) {
            Some(v) if v == MANIFEST_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: MANIFEST_VERSION,
                })
            }
            None => return Err(Error::Schema("manifest lacks an integer format_version".into())),
        }
        toml::from_str(text).map_err(|e| Error::Schema(format!("manifest: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(format!("manifest: {e}")))
    }

    /// Checks ids, row bounds and per-row annotations against a container of
    /// `count` rows.
    pub fn validate(&self, count: usize) -> Result<()> {
        let mut ids = HashSet::new();
        let mut claimed = HashSet::new();
        for t in &self.templates {
            if !ids.insert(t.template_id.as_str()) {
                return Err(Error::Schema(format!("duplicate template_id {}", t.template_id)));
            }
            if t.rows.is_empty() {
                return Err(Error::Schema(format!("template {} has no rows", t.template_id)));
            }
            for &r in &t.rows {
                if r >= count as u64 {
                    return Err(Error::Schema(format!(
                        "template {} row {r} is outside a container of {count} rows",
                        t.template_id
                    )));
                }
                if !claimed.insert(r) {
                    return Err(Error::Schema(format!(
                        "row {r} is claimed twice (again by {})",
                        t.template_id
                    )));
                }
            }
            let n = t.rows.len();
            if t.quality_hint.as_ref().is_some_and(|q| q.len() != n) {
                return Err(Error::Schema(format!(
                    "template {}: quality_hint length differs from rows",
                    t.template_id
                )));
            }
            if t.media_ids.as_ref().is_some_and(|m| m.len() != n) {
                return Err(Error::Schema(format!(
                    "template {}: media_ids length differs from rows",
                    t.template_id
                )));
            }
        }
        Ok(())
    }
}

/// Writes `ds` as a manifest at `path` plus a container next to it with the
/// extension `.cnan`.
pub fn write_dataset(ds: &Dataset<f64>, path: &Path, width: FloatWidth, config: Option<toml::Table>) -> Result<()> {
    let container_path = path.with_extension("cnan");
    let container_name = container_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Usage(format!("unusable manifest path {}", path.display())))?
        .to_string();

    let mut values = Vec::new();
    let mut templates = Vec::with_capacity(ds.templates.len());
    let mut next = 0u64;
    for t in &ds.templates {
        let n = t.embeddings.len();
        let rows: Vec<u64> = (next..next + n as u64).collect();
        next += n as u64;
        for e in &t.embeddings {
            if e.vector.len() != ds.d {
                return Err(Error::Dataset(format!(
                    "template {} has width {}, dataset {}",
                    t.id,
                    e.vector.len(),
                    ds.d
                )));
            }
            values.extend_from_slice(&e.vector);
        }
        let hints: Vec<Option<f64>> = t.embeddings.iter().map(|e| e.quality_hint).collect();
        let quality_hint = if hints.iter().all(Option::is_none) {
            None
        } else if hints.iter().all(Option::is_some) {
            Some(hints.into_iter().flatten().collect())
        } else {
            return Err(Error::Schema(format!(
                "template {} has quality hints on some rows only",
                t.id
            )));
        };
        let media: Vec<String> = t.embeddings.iter().map(|e| e.media_id.clone()).collect();
        let defaulted = media.iter().enumerate().all(|(k, m)| *m == default_media_id(&t.id, k));
        templates.push(ManifestTemplate {
            template_id: t.id.clone(),
            subject_id: t.subject_id.clone(),
            distribution: t.distribution,
            split: t.split,
            rows,
            quality_hint,
            media_ids: (!defaulted).then_some(media),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        d: ds.d,
        container: container_name,
        config,
        templates,
    };
    let container = EmbeddingContainer::new(ds.d, width, values)?;
    manifest.validate(container.count())?;
    container.write(&container_path)?;
    write_file(path, manifest.to_toml()?.as_bytes())
}

/// Loads a dataset from its manifest.
pub fn read_dataset(path: &Path) -> Result<(Dataset<f64>, Manifest)> {
    let text =
        String::from_utf8(read_file(path)?).map_err(|_| Error::Schema(format!("{} is not UTF-8", path.display())))?;
    let manifest = Manifest::parse(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let container = EmbeddingContainer::read(&dir.join(&manifest.container))?;
    if container.d != manifest.d {
        return Err(Error::Schema(format!(
            "manifest says d = {}, container has {}",
            manifest.d, container.d
        )));
    }
    manifest.validate(container.count())?;
    let templates = manifest
        .templates
        .iter()
        .map(|t| {
            let embeddings = t
                .rows
                .iter()
                .enumerate()
                .map(|(k, &r)| {
                    let media = match &t.media_ids {
                        Some(m) => m[k].clone(),
                        None => default_media_id(&t.template_id, k),
                    };
                    let mut e = Embedding::new(container.row(r as usize).to_vec(), media);
                    e.quality_hint = t.quality_hint.as_ref().map(|q| q[k]);
                    e
                })
                .collect();
            Template::new(
                t.template_id.clone(),
                t.subject_id.clone(),
                t.distribution,
                t.split,
                embeddings,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset {
            d: manifest.d,
            templates,
        },
        manifest,
    ))
}
