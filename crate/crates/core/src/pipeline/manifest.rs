use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hex;
use crate::error::{Error, Result};
use crate::seeds::{TAG_EXPOSURE, TAG_GRIDS, TAG_HOLDOUT, TAG_MODEL, TAG_TRAINING};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    /// Domain-separation tag the seed was derived under.
    pub stream: String,
    pub index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: Vec<SeedRecord>,
    /// Paths relative to the output directory.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    /// Wall-clock seconds of the latest run of each stage.
    pub timings: BTreeMap<String, f64>,
}

pub(crate) fn file_digest(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex(&Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub fn new(config_hash: String, master_seed: u64) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            master_seed,
            seeds: Vec::new(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.clone(),
                hint: "no run manifest; run grid-gen or run-all first".into(),
            },
            _ => Error::io(&path, e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn record_seed(&mut self, stream: &str, index: u64, grid: Option<&str>, seed: u64) {
        let rec = SeedRecord { stream: stream.into(), index, grid: grid.map(str::to_string), seed };
        self.seeds.retain(|s| !(s.stream == rec.stream && s.index == rec.index && s.grid == rec.grid));
        self.seeds.push(rec);
        self.seeds.sort_by(|a, b| (&a.stream, a.index, &a.grid).cmp(&(&b.stream, b.index, &b.grid)));
    }

    /// Hashes `rel` (relative to `out`) into the artifact list.
    pub fn record_artifact(&mut self, out: &Path, stage: &str, rel: &str) -> Result<()> {
        let (sha256, bytes) = file_digest(&out.join(rel))?;
        self.artifacts.insert(rel.to_string(), ArtifactRecord { stage: stage.into(), sha256, bytes });
        Ok(())
    }

    /// Seeds come from known streams and no two streams share a value.
    pub fn audit_seeds(&self) -> Result<()> {
        let known = [TAG_GRIDS, TAG_TRAINING, TAG_MODEL, TAG_EXPOSURE, TAG_HOLDOUT];
        let mut seen: BTreeMap<u64, &SeedRecord> = BTreeMap::new();
        for s in &self.seeds {
            if !known.contains(&s.stream.as_str()) {
                return Err(Error::Config(format!("manifest seed from unknown stream {}", s.stream)));
            }
            if let Some(prev) = seen.insert(s.seed, s) {
                return Err(Error::Config(format!(
                    "seed {} shared by streams {} and {}",
                    s.seed, prev.stream, s.stream
                )));
            }
        }
        Ok(())
    }

    /// Every listed file exists with its recorded hash, and every CSV parses
    /// with a consistent column count.
    pub fn verify_artifacts(&self, out: &Path) -> Result<()> {
        for (rel, rec) in &self.artifacts {
            let path = out.join(rel);
            if !path.is_file() {
                return Err(Error::MissingArtifact { path, hint: "listed in the manifest but absent".into() });
            }
            let (sha, _) = file_digest(&path)?;
            if sha != rec.sha256 {
                return Err(Error::Config(format!("{rel} changed since the manifest was written")));
            }
            if rel.ends_with(".csv") {
                let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::Parse {
                    file: rel.clone(),
                    row: 0,
                    msg: e.to_string(),
                })?;
                for (i, r) in rdr.records().enumerate() {
                    r.map_err(|e| Error::Parse { file: rel.clone(), row: i + 2, msg: e.to_string() })?;
                }
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> BTreeSet<&str> {
        self.artifacts.values().map(|a| a.stage.as_str()).collect()
    }
}
