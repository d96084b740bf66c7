//! Dataset directories: one entity file per sample plus `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_entity, read_file, write_entity, write_file};
use super::{HarnessError, Result};
use crate::simulator::{generate_split, Regime, WorldConfig, SPLITS};
use crate::targets::Entity;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub seed: u64,
    pub regime: Regime,
    /// Relative to the dataset directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub world: WorldConfig,
    /// Per split, per regime.
    pub regime_counts: BTreeMap<String, BTreeMap<Regime, usize>>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> impl Iterator<Item = &ManifestEntry> {
        let name = name.to_string();
        self.entries.iter().filter(move |e| e.split == name)
    }
}

/// A loaded sample.
#[derive(Clone, Debug)]
pub struct Record {
    pub entity: Entity,
    pub regime: Regime,
    pub seed: u64,
}

/// Simulates and writes all three splits. Entities are written in slot
/// order, so the directory content is a pure function of the config.
pub fn generate_dataset(world: &WorldConfig, counts: [usize; 3], dir: &Path) -> Result<Manifest> {
    if counts.iter().any(|&n| n == 0) {
        return Err(HarnessError::Config(
            "every split needs at least one entity".into(),
        ));
    }
    let mut entries = Vec::new();
    let mut regime_counts = BTreeMap::new();
    for (split, (&name, &n)) in SPLITS.iter().zip(&counts).enumerate() {
        let samples = generate_split(world, split, n)?;
        let mut tally: BTreeMap<Regime, usize> = Regime::ALL.iter().map(|&r| (r, 0)).collect();
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("{name}/{i:05}.wisp");
            write_entity(&dir.join(&rel), &s.entity)?;
            *tally.entry(s.regime).or_default() += 1;
            entries.push(ManifestEntry {
                split: name.to_string(),
                seed: s.seed,
                regime: s.regime,
                path: rel,
            });
        }
        regime_counts.insert(name.to_string(), tally);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        world: world.clone(),
        regime_counts,
        entries,
    };
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| HarnessError::Format(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Record>> {
    let manifest = read_manifest(dir)?;
    let records: Vec<Record> = manifest
        .split(split)
        .map(|e| {
            Ok(Record {
                entity: read_entity(&dir.join(&e.path))?,
                regime: e.regime,
                seed: e.seed,
            })
        })
        .collect::<Result<_>>()?;
    if records.is_empty() {
        return Err(HarnessError::Config(format!(
            "split {split} is empty or unknown"
        )));
    }
    Ok(records)
}

/// Every file of a dataset directory, sorted, for byte-level comparison.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(dir)?;
    let mut files: Vec<PathBuf> = manifest.entries.iter().map(|e| dir.join(&e.path)).collect();
    files.push(dir.join(MANIFEST_FILE));
    files.sort();
    Ok(files)
}
