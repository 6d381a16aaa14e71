//! JSON-lines scene manifests with a small metadata header file.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{SceneRecord, Split};
use crate::error::{Error, Result};

pub const GENERATOR_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "manifest.meta.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub instances: usize,
    pub records: usize,
    pub views: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: u64,
    pub version: String,
    pub split: Split,
    pub counts: ManifestCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub version: String,
    pub records: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn meta(&self) -> ManifestMeta {
        let instances: BTreeSet<&str> = self.records.iter().map(|r| r.instance_id.as_str()).collect();
        ManifestMeta {
            seed: self.seed,
            version: self.version.clone(),
            split: self.split,
            counts: ManifestCounts {
                instances: instances.len(),
                records: self.records.len(),
                views: self.records.first().map_or(0, |r| r.num_views),
            },
        }
    }

    pub fn instance_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.instance_id.as_str()).collect()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.scene_id.as_str()) {
                return Err(Error::domain(format!("duplicate scene_id {}", r.scene_id)));
            }
        }
        Ok(())
    }
}

/// Fails if any object instance appears in both splits.
pub fn check_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let shared: Vec<&str> = a.instance_ids().intersection(&b.instance_ids()).cloned().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::domain(format!("instances shared between splits: {shared:?}")))
    }
}

/// Manifest body as written to disk.
pub fn manifest_text(m: &DatasetManifest) -> Result<String> {
    let mut out = String::new();
    for r in &m.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    m.check_unique()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let body = manifest_text(m)?;
    let meta = serde_json::to_string_pretty(&m.meta())? + "\n";
    for (name, text) in [(MANIFEST_FILE, body), (META_FILE, meta)] {
        let tmp = dir.join(format!("{name}.tmp"));
        let path = dir.join(name);
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses and validates a manifest directory. Image files must exist.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m = read_manifest_unchecked(dir)?;
    let missing: Vec<String> = m
        .records
        .iter()
        .filter(|r| {
            [&r.image, &r.clean_image, &r.mask_image]
                .iter()
                .any(|p| !dir.join(p).is_file())
        })
        .map(|r| r.scene_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Integrity { scene_ids: missing });
    }
    Ok(m)
}

/// Parses a manifest without touching the referenced images.
pub fn read_manifest_unchecked(dir: &Path) -> Result<DatasetManifest> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ManifestMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Format {
        line: e.line(),
        message: format!("{META_FILE}: {e}"),
    })?;
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    if records.len() != meta.counts.records {
        return Err(Error::Format {
            line: records.len() + 1,
            message: format!(
                "expected {} records, found {} (truncated manifest?)",
                meta.counts.records,
                records.len()
            ),
        });
    }
    let m = DatasetManifest {
        split: meta.split,
        seed: meta.seed,
        version: meta.version,
        records,
    };
    m.check_unique()?;
    Ok(m)
}
