use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::DatasetParams;
use crate::error::{Error, Result};
use crate::exposure::{Direction, ExposureOptions};
use crate::grid::{GridFamily, BUSES_FILE, LINES_FILE};
use crate::model::ModelConfig;
use crate::seeds::{derive_seed, TAG_GRIDS};

/// Index offset for evaluation-grid seeds, keeping them clear of the
/// training-grid indices.
const EVAL_GRID_INDEX: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GridSource {
    Synthetic {
        family: GridFamily,
        n_buses: usize,
        capacity_factor: f64,
        /// Derived from the master seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// A directory with `buses.csv` and `lines.csv`.
    Import { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub pool_per_grid: usize,
    pub cap: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub depth_weight_exponent: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetParams::default();
        DatasetSection {
            pool_per_grid: d.pool_per_grid,
            cap: d.cap,
            k_min: d.k_min,
            k_max: d.k_max,
            depth_weight_exponent: d.depth_weight_exponent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExposureSection {
    /// Cascade samples per evaluation grid (`N_s`).
    pub samples: usize,
    pub mask_self_loops: bool,
    pub direction: Direction,
}

impl Default for ExposureSection {
    fn default() -> Self {
        ExposureSection { samples: 100, mask_self_loops: true, direction: Direction::Outgoing }
    }
}

impl ExposureSection {
    pub fn options(&self) -> ExposureOptions {
        ExposureOptions { mask_self_loops: self.mask_self_loops, direction: self.direction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Held-out cascades per evaluation grid.
    pub holdout: usize,
    /// Top-tau thresholds, in percent.
    pub tau: Vec<f64>,
    /// Sample counts for the efficiency sweep.
    pub ns_list: Vec<usize>,
    pub damping: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            holdout: 300,
            tau: (1..=10).map(f64::from).collect(),
            ns_list: vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
            damping: crate::baselines::DEFAULT_DAMPING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub training_grids: Vec<GridSource>,
    pub evaluation_grids: Vec<GridSource>,
    #[serde(default)]
    pub dataset: DatasetSection,
    /// `model.seed` is ignored; the model stream is derived from `seed`.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub exposure: ExposureSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

/// Which side of the train/evaluate split a grid belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridRole {
    Train,
    Eval,
}

impl GridRole {
    pub fn as_str(self) -> &'static str {
        match self {
            GridRole::Train => "train",
            GridRole::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGrid {
    pub role: GridRole,
    pub name: String,
    pub source: GridSource,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; import paths are resolved against its directory and
    /// must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "config file not found".into(),
            },
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for src in cfg.training_grids.iter_mut().chain(cfg.evaluation_grids.iter_mut()) {
            if let GridSource::Import { path: p } = src {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                for f in [BUSES_FILE, LINES_FILE] {
                    if !p.join(f).is_file() {
                        return Err(Error::MissingArtifact {
                            path: p.join(f),
                            hint: "imported grid directory needs buses.csv and lines.csv".into(),
                        });
                    }
                }
            }
        }
        if let Some(out) = cfg.out_dir.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.training_grids.is_empty() {
            return bad("at least one training grid is required".into());
        }
        if self.evaluation_grids.is_empty() {
            return bad("at least one evaluation grid is required".into());
        }
        self.model.validate()?;
        let d = &self.dataset;
        if d.pool_per_grid == 0 || d.cap == 0 {
            return bad("dataset.pool_per_grid and dataset.cap must be > 0".into());
        }
        if d.k_min == 0 || d.k_min > d.k_max {
            return bad(format!("dataset k range [{}, {}] is empty", d.k_min, d.k_max));
        }
        let e = &self.evaluation;
        if e.tau.is_empty() || e.tau.iter().any(|&t| !(t > 0.0 && t <= 100.0)) {
            return bad("evaluation.tau must be a non-empty list in (0, 100]".into());
        }
        if e.ns_list.is_empty() || e.ns_list.contains(&0) {
            return bad("evaluation.ns_list must be a non-empty list of positive counts".into());
        }
        let max_ns = e.ns_list.iter().copied().max().unwrap_or(0);
        if max_ns > self.exposure.samples {
            return bad(format!(
                "evaluation.ns_list needs {max_ns} exposure samples, exposure.samples is {}",
                self.exposure.samples
            ));
        }
        if self.exposure.samples == 0 || e.holdout == 0 {
            return bad("exposure.samples and evaluation.holdout must be > 0".into());
        }
        if !(0.0..1.0).contains(&e.damping) {
            return bad(format!("evaluation.damping {} outside [0, 1)", e.damping));
        }
        let mut names = BTreeSet::new();
        for g in self.grids() {
            if !names.insert(g.name.clone()) {
                return bad(format!("grid {} appears twice; training and evaluation grids must differ", g.name));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dataset_params(&self) -> DatasetParams {
        DatasetParams {
            pool_per_grid: self.dataset.pool_per_grid,
            cap: self.dataset.cap,
            k_min: self.dataset.k_min,
            k_max: self.dataset.k_max,
            max_label: (self.model.classes - 1) as u32,
            depth_weight_exponent: self.dataset.depth_weight_exponent,
        }
    }

    fn resolve(&self, role: GridRole, index: usize, src: &GridSource) -> ResolvedGrid {
        let mut source = src.clone();
        let name = match &mut source {
            GridSource::Synthetic { family, n_buses, seed, .. } => {
                let offset = if role == GridRole::Eval { EVAL_GRID_INDEX } else { 0 };
                let s = *seed.get_or_insert_with(|| derive_seed(self.seed, TAG_GRIDS, offset + index as u64));
                format!("{}-{}-{}", family.as_str(), n_buses, s)
            }
            GridSource::Import { path } => path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_else(|| "grid".into()),
        };
        ResolvedGrid { role, name, source }
    }

    /// Training grids then evaluation grids, with seeds filled in.
    pub fn grids(&self) -> Vec<ResolvedGrid> {
        let train = self.training_grids.iter().enumerate().map(|(i, s)| self.resolve(GridRole::Train, i, s));
        let eval = self.evaluation_grids.iter().enumerate().map(|(i, s)| self.resolve(GridRole::Eval, i, s));
        train.chain(eval).collect()
    }

    pub fn grids_with_role(&self, role: GridRole) -> Vec<ResolvedGrid> {
        self.grids().into_iter().filter(|g| g.role == role).collect()
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
