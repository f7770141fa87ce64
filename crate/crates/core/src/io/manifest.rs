//! Dataset manifest: a JSON list of cases with file paths relative to the
//! manifest's directory.

use super::volume::{read_volume, write_volume, Volume};
use crate::error::{Error, Result};
use crate::phantom::{Split, VolumeRecord};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: PathBuf,
    pub vessel: PathBuf,
    pub myo: PathBuf,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn schema(field: String, detail: impl Into<String>) -> Error {
    Error::Schema {
        field,
        detail: detail.into(),
    }
}

/// Parses and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let entries: Vec<ManifestEntry> = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        schema(field, e.into_inner().to_string())
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ids = HashSet::new();
    for (i, e) in entries.iter().enumerate() {
        if e.id.is_empty() || !ids.insert(e.id.as_str()) {
            return Err(schema(format!("[{i}].id"), format!("id `{}` is empty or duplicated", e.id)));
        }
        for (name, p) in [("volume", &e.volume), ("vessel", &e.vessel), ("myo", &e.myo)] {
            if !root.join(p).is_file() {
                return Err(schema(format!("[{i}].{name}"), format!("file not found: {}", p.display())));
            }
        }
    }
    Ok(Manifest { root, entries })
}

pub fn save_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

impl Manifest {
    /// Reads every case. The intensity file supplies the spacing; masks must
    /// agree with it.
    pub fn load_records(&self) -> Result<Vec<(VolumeRecord, Split)>> {
        self.entries
            .iter()
            .map(|e| {
                let vol = read_volume(self.root.join(&e.volume))?;
                let vessel = read_volume(self.root.join(&e.vessel))?.to_mask()?;
                let myo = read_volume(self.root.join(&e.myo))?.to_mask()?;
                for (name, m) in [("vessel", &vessel), ("myo", &myo)] {
                    if m.dims() != vol.dims || m.spacing() != vol.spacing {
                        return Err(Error::Validation(format!(
                            "case {}: {name} mask {:?} @ {:?} does not match volume {:?} @ {:?}",
                            e.id,
                            m.dims(),
                            m.spacing(),
                            vol.dims,
                            vol.spacing
                        )));
                    }
                }
                let rec = VolumeRecord {
                    id: e.id.clone(),
                    intensity: vol.to_tensor(),
                    vessel,
                    myo,
                    spacing: vol.spacing,
                };
                Ok((rec, e.split))
            })
            .collect()
    }
}

/// Writes `<id>_image.svol`, `<id>_vessel.svol`, `<id>_myo.svol` per case
/// and `manifest.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, cases: &[(VolumeRecord, Split)], seeds: &[u64]) -> Result<Manifest> {
    let dir = dir.as_ref();
    if seeds.len() != cases.len() {
        return Err(Error::Usage(format!("{} seeds for {} cases", seeds.len(), cases.len())));
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(cases.len());
    for ((rec, split), &seed) in cases.iter().zip(seeds) {
        let file = |kind: &str| PathBuf::from(format!("{}_{kind}.svol", rec.id));
        let e = ManifestEntry {
            id: rec.id.clone(),
            volume: file("image"),
            vessel: file("vessel"),
            myo: file("myo"),
            split: *split,
            seed,
        };
        write_volume(dir.join(&e.volume), &Volume::from_tensor(&rec.intensity, rec.spacing)?)?;
        write_volume(dir.join(&e.vessel), &Volume::from_mask(&rec.vessel))?;
        write_volume(dir.join(&e.myo), &Volume::from_mask(&rec.myo))?;
        entries.push(e);
    }
    save_manifest(dir.join(MANIFEST_FILE), &entries)?;
    Ok(Manifest {
        root: dir.to_path_buf(),
        entries,
    })
}
