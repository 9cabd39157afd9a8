//! Fixtures shared by the criterion benches.

use gridcascade_core::cascade::{build_holdout_pool, CascadeSample};
use gridcascade_core::grid::{generate_synthetic_grid, GridFamily, PowerGrid, SyntheticSpec};
use gridcascade_core::model::{GruGatModel, ModelConfig};

pub fn grid(family: GridFamily, n_buses: usize) -> PowerGrid {
    generate_synthetic_grid(&SyntheticSpec { n_buses, family, capacity_factor: 1.3, seed: 17 })
        .expect("bench grid generates")
}

/// Propagating cascades on `grid`.
pub fn cascades(grid: &PowerGrid, n: usize) -> Vec<CascadeSample> {
    build_holdout_pool(grid, n, 1, 3, 23).expect("bench pool builds").samples
}

pub fn model(hidden_dim: usize) -> GruGatModel {
    GruGatModel::new(ModelConfig { hidden_dim, seed: 5, ..ModelConfig::default() }).expect("valid config")
}
