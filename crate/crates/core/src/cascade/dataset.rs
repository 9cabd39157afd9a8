//! Training datasets (depth-weighted oversampling of a random pool) and
//! held-out evaluation pools.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{simulate_cascade, CascadeSample};
use crate::error::{Error, Result};
use crate::grid::PowerGrid;
use crate::seeds::{derive_seed, rng};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Training,
    Heldout,
    Exposure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pool_size: usize,
    pub cap: usize,
    pub seed: u64,
    /// Pool samples that converged at the first iteration.
    pub discarded_shallow: usize,
    /// Pool samples whose deepest label did not fit the class budget.
    pub discarded_deep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub pool_per_grid: usize,
    /// Samples drawn per grid after oversampling.
    pub cap: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Samples with any label above this are dropped (class budget `C - 1`).
    pub max_label: u32,
    /// Selection weight is `G^depth_weight_exponent`.
    pub depth_weight_exponent: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            pool_per_grid: 2000,
            cap: 5000,
            k_min: 1,
            k_max: 3,
            max_label: 99,
            depth_weight_exponent: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<CascadeSample>,
    pub role: DatasetRole,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    /// Mean fraction of lines failing after the initial iteration.
    pub mean_scale: f64,
    /// Mean `G`.
    pub mean_depth: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    role: DatasetRole,
    provenance: Provenance,
    sample_count: usize,
    stats: Option<PoolStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn stats(&self) -> Option<PoolStats> {
        if self.samples.is_empty() {
            return None;
        }
        let n = self.samples.len() as f64;
        let scale = self
            .samples
            .iter()
            .map(|s| s.propagated_count() as f64 / s.line_count() as f64)
            .sum::<f64>();
        let depth = self.samples.iter().map(|s| s.max_iteration() as f64).sum::<f64>();
        Some(PoolStats { mean_scale: scale / n, mean_depth: depth / n })
    }

    /// Writes `samples.jsonl` and `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SAMPLES_FILE);
        let mut out = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest {
            role: self.role,
            provenance: self.provenance.clone(),
            sample_count: self.samples.len(),
            stats: self.stats(),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let path = dir.join(SAMPLES_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: CascadeSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                file: SAMPLES_FILE.into(),
                row: i + 1,
                msg: e.to_string(),
            })?;
            samples.push(s);
        }
        if samples.len() != manifest.sample_count {
            return Err(Error::Dataset(format!(
                "manifest lists {} samples, found {}",
                manifest.sample_count,
                samples.len()
            )));
        }
        Ok(Dataset { samples, role: manifest.role, provenance: manifest.provenance })
    }
}

/// Draws `k` uniform in `[k_min, k_max]` (clamped to the line count) and
/// then `k` distinct lines uniformly.
pub fn k_range_draw<R: Rng>(line_count: usize, k_min: usize, k_max: usize, rng: &mut R) -> Vec<usize> {
    let hi = k_max.min(line_count).max(1);
    let lo = k_min.clamp(1, hi);
    let k = rng.random_range(lo..=hi);
    let mut picked = sample_indices(rng, line_count, k).into_vec();
    picked.sort_unstable();
    picked
}

/// `n` indices drawn with replacement, index `i` with probability
/// proportional to `depths[i]^exponent`.
pub fn depth_weighted_draw<R: Rng>(depths: &[u32], exponent: f64, n: usize, rng: &mut R) -> Vec<usize> {
    let mut cumulative = Vec::with_capacity(depths.len());
    let mut total = 0.0;
    for &g in depths {
        total += (g as f64).powf(exponent);
        cumulative.push(total);
    }
    (0..n)
        .map(|_| {
            let x = rng.random::<f64>() * total;
            cumulative.partition_point(|&c| c <= x).min(depths.len() - 1)
        })
        .collect()
}

fn check_k_range(k_min: usize, k_max: usize) -> Result<()> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::Config(format!("invalid initial-failure range [{k_min}, {k_max}]")));
    }
    Ok(())
}

/// Simulates one cascade per job; job `j` of grid `gi` uses its own seed, so
/// results do not depend on execution order.
fn simulate_pool(grid: &PowerGrid, jobs: usize, k_min: usize, k_max: usize, seed: u64, stream: u64) -> Result<Vec<CascadeSample>> {
    (0..jobs)
        .map(|j| {
            let job_seed = derive_seed(seed, grid.name(), stream.wrapping_mul(1 << 32) + j as u64);
            let mut r = rng(job_seed);
            let initial = k_range_draw(grid.line_count(), k_min, k_max, &mut r);
            simulate_cascade(grid, &initial).map(|s| s.with_seed(job_seed))
        })
        .collect()
}

pub fn build_training_dataset(grids: &[PowerGrid], params: &DatasetParams, seed: u64) -> Result<Dataset> {
    if params.cap == 0 {
        return Err(Error::Config("cap must be > 0".into()));
    }
    check_k_range(params.k_min, params.k_max)?;
    let mut samples = Vec::new();
    let mut discarded_shallow = 0;
    let mut discarded_deep = 0;
    for (gi, grid) in grids.iter().enumerate() {
        let pool = simulate_pool(grid, params.pool_per_grid, params.k_min, params.k_max, seed, gi as u64)?;
        let before = pool.len();
        let propagating: Vec<CascadeSample> = pool.into_iter().filter(|s| s.max_iteration() >= 2).collect();
        discarded_shallow += before - propagating.len();
        let before = propagating.len();
        let kept: Vec<CascadeSample> =
            propagating.into_iter().filter(|s| s.max_iteration() <= params.max_label).collect();
        discarded_deep += before - kept.len();
        if kept.is_empty() {
            return Err(Error::Dataset(format!(
                "grid {}: no propagating cascades; lower capacity_factor",
                grid.name()
            )));
        }
        let depths: Vec<u32> = kept.iter().map(|s| s.max_iteration()).collect();
        let mut r = rng(derive_seed(seed, "oversample", gi as u64));
        for i in depth_weighted_draw(&depths, params.depth_weight_exponent, params.cap, &mut r) {
            samples.push(kept[i].clone());
        }
    }
    Ok(Dataset {
        samples,
        role: DatasetRole::Training,
        provenance: Provenance {
            pool_size: params.pool_per_grid,
            cap: params.cap,
            seed,
            discarded_shallow,
            discarded_deep,
        },
    })
}

/// `n` propagating cascades (G >= 2) on `grid`, drawn from their own seed
/// stream. Used for held-out ground truth and for exposure extraction.
pub fn build_holdout_pool(grid: &PowerGrid, n: usize, k_min: usize, k_max: usize, seed: u64) -> Result<Dataset> {
    check_k_range(k_min, k_max)?;
    let max_attempts = 50 * n.max(20);
    let mut samples = Vec::with_capacity(n);
    let mut discarded = 0;
    let mut j = 0u64;
    while samples.len() < n {
        if j as usize >= max_attempts {
            return Err(Error::Dataset(format!(
                "grid {}: only {} of {n} propagating cascades in {max_attempts} draws; lower capacity_factor",
                grid.name(),
                samples.len()
            )));
        }
        let job_seed = derive_seed(seed, grid.name(), j);
        j += 1;
        let mut r = rng(job_seed);
        let initial = k_range_draw(grid.line_count(), k_min, k_max, &mut r);
        let s = simulate_cascade(grid, &initial)?.with_seed(job_seed);
        if s.max_iteration() >= 2 {
            samples.push(s);
        } else {
            discarded += 1;
        }
    }
    Ok(Dataset {
        samples,
        role: DatasetRole::Heldout,
        provenance: Provenance { pool_size: j as usize, cap: n, seed, discarded_shallow: discarded, discarded_deep: 0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_synthetic_grid, GridFamily, SyntheticSpec};

    fn grid(seed: u64) -> PowerGrid {
        generate_synthetic_grid(&SyntheticSpec { n_buses: 30, family: GridFamily::RingMesh, capacity_factor: 1.15, seed })
            .unwrap()
    }

    #[test]
    fn full_scale_cap_is_accepted() {
        let p = DatasetParams { cap: 30_000, pool_per_grid: 50, ..Default::default() };
        let d = build_training_dataset(&[grid(1)], &p, 3).unwrap();
        assert_eq!(d.len(), 30_000);
    }

    #[test]
    fn training_has_no_shallow_samples() {
        let p = DatasetParams { cap: 200, pool_per_grid: 100, ..Default::default() };
        let d = build_training_dataset(&[grid(1), grid(2)], &p, 3).unwrap();
        assert_eq!(d.len(), 400);
        assert!(d.samples.iter().all(|s| s.max_iteration() >= 2));
        assert!(d.provenance.discarded_shallow > 0);
    }

    #[test]
    fn equal_depths_select_uniformly() {
        let mut r = rng(11);
        let draws = depth_weighted_draw(&[2, 2, 2, 2], 1.0, 40_000, &mut r);
        for i in 0..4 {
            let c = draws.iter().filter(|&&d| d == i).count() as f64;
            // Binomial(40000, 1/4): sigma ~ 86.6.
            assert!((c - 10_000.0).abs() < 3.0 * 86.6, "{c}");
        }
    }

    #[test]
    fn depth_weighting_ratio() {
        let mut r = rng(5);
        let n = 10_000;
        let draws = depth_weighted_draw(&[2, 6], 1.0, n, &mut r);
        let deep = draws.iter().filter(|&&d| d == 1).count() as f64;
        // Selection probability of the G=6 sample is 6/8.
        let sigma = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((deep - 7500.0).abs() < 3.0 * sigma, "{deep}");
    }

    #[test]
    fn holdout_is_deterministic_and_propagating() {
        let g = grid(4);
        let a = build_holdout_pool(&g, 40, 1, 3, 99).unwrap();
        let b = build_holdout_pool(&g, 40, 1, 3, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert!(a.samples.iter().all(|s| s.max_iteration() >= 2 && s.propagated_count() >= 1));
        let stats = a.stats().unwrap();
        assert!(stats.mean_depth >= 2.0 && stats.mean_scale > 0.0);
    }

    #[test]
    fn non_propagating_grid_errors() {
        let g = generate_synthetic_grid(&SyntheticSpec {
            n_buses: 12,
            family: GridFamily::RingMesh,
            capacity_factor: 1e6,
            seed: 0,
        })
        .unwrap();
        let p = DatasetParams { cap: 10, pool_per_grid: 20, ..Default::default() };
        let err = build_training_dataset(&[g], &p, 0).unwrap_err().to_string();
        assert!(err.contains("no propagating cascades; lower capacity_factor"), "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let d = build_holdout_pool(&grid(2), 10, 1, 2, 1).unwrap();
        d.save(tmp.path()).unwrap();
        assert_eq!(Dataset::load(tmp.path()).unwrap(), d);
    }
}
