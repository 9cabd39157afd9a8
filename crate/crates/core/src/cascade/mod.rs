//! Iterative overload cascades under DC power flow.

mod dataset;

pub use dataset::{
    build_holdout_pool, build_training_dataset, depth_weighted_draw, k_range_draw, Dataset, DatasetParams,
    DatasetRole, PoolStats, Provenance, MANIFEST_FILE, SAMPLES_FILE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PowerGrid;
use crate::powerflow::solve_dc;

/// One simulated cascade. `labels[u]` is 0 for a line that stayed in
/// service, 1 for an initial failure and `g >= 2` for a line that tripped
/// on overload at iteration `g`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSample", into = "RawSample")]
pub struct CascadeSample {
    grid_name: String,
    seed: u64,
    labels: Vec<u32>,
    max_iteration: u32,
}

#[derive(Serialize, Deserialize)]
struct RawSample {
    grid: String,
    seed: u64,
    labels: Vec<u32>,
}

impl TryFrom<RawSample> for CascadeSample {
    type Error = Error;

    fn try_from(raw: RawSample) -> Result<Self> {
        CascadeSample::new(raw.grid, raw.seed, raw.labels)
    }
}

impl From<CascadeSample> for RawSample {
    fn from(s: CascadeSample) -> Self {
        RawSample { grid: s.grid_name, seed: s.seed, labels: s.labels }
    }
}

impl CascadeSample {
    /// Checks that some line is an initial failure and that iterations
    /// `2..=G` are each populated.
    pub fn new(grid_name: impl Into<String>, seed: u64, labels: Vec<u32>) -> Result<Self> {
        let max_iteration = labels.iter().copied().max().unwrap_or(0);
        if !labels.contains(&1) {
            return Err(Error::InvalidSample("no initial failure (label 1)".into()));
        }
        let mut present = vec![false; max_iteration as usize + 1];
        for &g in &labels {
            present[g as usize] = true;
        }
        if let Some(gap) = (2..=max_iteration).find(|&g| !present[g as usize]) {
            return Err(Error::InvalidSample(format!("no line failed at iteration {gap}")));
        }
        Ok(CascadeSample { grid_name: grid_name.into(), seed, labels, max_iteration })
    }

    pub fn grid_name(&self) -> &str {
        &self.grid_name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// `G`, the last iteration at which a line failed.
    pub fn max_iteration(&self) -> u32 {
        self.max_iteration
    }

    pub fn line_count(&self) -> usize {
        self.labels.len()
    }

    /// Positions of the initial failures.
    pub fn initial_failures(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &g)| g == 1).map(|(i, _)| i).collect()
    }

    /// Number of lines that failed after the initial iteration.
    pub fn propagated_count(&self) -> usize {
        self.labels.iter().filter(|&&g| g > 1).count()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A simulated cascade together with the failed set after each iteration.
#[derive(Debug, Clone)]
pub struct CascadeRun {
    pub sample: CascadeSample,
    /// `failed_sets[g - 1]` is the failed mask at the end of iteration `g`.
    pub failed_sets: Vec<Vec<bool>>,
}

/// Runs the cascade from `initial_failures` (line positions) to its fixed
/// point. Every operational line whose flow magnitude strictly exceeds its
/// capacity fails in the same iteration.
pub fn simulate_cascade(grid: &PowerGrid, initial_failures: &[usize]) -> Result<CascadeSample> {
    simulate_cascade_detailed(grid, initial_failures).map(|r| r.sample)
}

pub fn simulate_cascade_detailed(grid: &PowerGrid, initial_failures: &[usize]) -> Result<CascadeRun> {
    let n = grid.line_count();
    if initial_failures.is_empty() {
        return Err(Error::InvalidSample("initial failure set is empty".into()));
    }
    let mut labels = vec![0u32; n];
    for &l in initial_failures {
        if l >= n {
            return Err(Error::InvalidSample(format!("initial failure {l} out of range")));
        }
        labels[l] = 1;
    }
    let mut failed: Vec<bool> = labels.iter().map(|&g| g > 0).collect();
    let mut failed_sets = vec![failed.clone()];
    let mut g = 1u32;
    loop {
        g += 1;
        let active: Vec<bool> = failed.iter().map(|f| !f).collect();
        let sol = solve_dc(grid, &active)
            .map_err(|e| Error::Cascade { iteration: g as usize, source: Box::new(e) })?;
        let mut any = false;
        for (l, line) in grid.lines().iter().enumerate() {
            if active[l] && sol.flow[l].abs() > line.capacity {
                labels[l] = g;
                failed[l] = true;
                any = true;
            }
        }
        if !any {
            break;
        }
        failed_sets.push(failed.clone());
    }
    let sample = CascadeSample::new(grid.name(), 0, labels)?;
    Ok(CascadeRun { sample, failed_sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::*;
    use crate::grid::{generate_synthetic_grid, GridFamily, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn huge_capacity_stops_at_first_iteration() {
        let spec = SyntheticSpec { n_buses: 20, family: GridFamily::RingMesh, capacity_factor: 1e6, seed: 1 };
        let g = generate_synthetic_grid(&spec).unwrap();
        let s = simulate_cascade(&g, &[0, 3]).unwrap();
        assert_eq!(s.max_iteration(), 1);
        assert!(s.labels().iter().all(|&x| x <= 1));
    }

    #[test]
    fn all_lines_failed_initially() {
        let g = triangle([1.0, -1.0, 0.0], 1.0, 0.7);
        let s = simulate_cascade(&g, &[0, 1, 2]).unwrap();
        assert_eq!(s.max_iteration(), 1);
    }

    #[test]
    fn triangle_overload_cascade() {
        // The 2/3 line trips; the two-hop path must carry 1.0 > 0.7.
        let g = triangle([1.0, -1.0, 0.0], 1.0, 0.7);
        let s = simulate_cascade(&g, &[0]).unwrap();
        assert_eq!(s.labels(), &[1, 2, 2]);
        assert_eq!(s.max_iteration(), 2);
    }

    #[test]
    fn sample_validation() {
        assert!(CascadeSample::new("g", 0, vec![0, 0]).is_err());
        assert!(CascadeSample::new("g", 0, vec![1, 3]).is_err());
        let s = CascadeSample::new("g", 5, vec![1, 2, 0]).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"grid":"g","seed":5,"labels":[1,2,0]}"#);
        let back: CascadeSample = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<CascadeSample>(r#"{"grid":"g","seed":1,"labels":[0,2]}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn cascade_invariants(seed in 0u64..500, n in 8usize..30, hub in any::<bool>(), k in 1usize..4) {
            let family = if hub { GridFamily::HubSpoke } else { GridFamily::RingMesh };
            let g = generate_synthetic_grid(&SyntheticSpec { n_buses: n, family, capacity_factor: 1.2, seed }).unwrap();
            let l = g.line_count();
            let initial: Vec<usize> = (0..k.min(l)).map(|i| (seed as usize * 7 + i * 13) % l).collect();
            let run = simulate_cascade_detailed(&g, &initial).unwrap();
            for w in run.failed_sets.windows(2) {
                prop_assert!(w[0].iter().zip(&w[1]).all(|(a, b)| !a || *b));
            }
            let big_g = run.sample.max_iteration() as usize;
            prop_assert!(big_g <= l);
            prop_assert_eq!(run.failed_sets.len(), big_g);
            let again = simulate_cascade(&g, &initial).unwrap();
            prop_assert_eq!(again, run.sample);
        }
    }
}
