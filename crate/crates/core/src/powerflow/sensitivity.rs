use super::{Cholesky, IslandLayout};
use crate::error::{Error, Result};
use crate::grid::PowerGrid;

/// `|1 - ptdf_k(i_k -> j_k)|` below this marks line `k` as radial.
pub const RADIAL_TOL: f64 = 1e-9;

/// Injection sensitivities: `matrix[l * buses + b]` is the flow on line `l`
/// when one unit is injected at bus `b` and withdrawn at its island's
/// reference bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Ptdf {
    lines: usize,
    buses: usize,
    matrix: Vec<f64>,
    island: Vec<usize>,
}

impl Ptdf {
    pub fn line_count(&self) -> usize {
        self.lines
    }

    pub fn bus_count(&self) -> usize {
        self.buses
    }

    pub fn injection(&self, line: usize, bus: usize) -> f64 {
        self.matrix[line * self.buses + bus]
    }

    /// Flow on `line` for a unit transfer injected at bus `s` and withdrawn
    /// at bus `t` (positions). Zero when `s` and `t` are in different islands.
    pub fn transfer(&self, line: usize, s: usize, t: usize) -> f64 {
        if self.island[s] != self.island[t] {
            return 0.0;
        }
        self.injection(line, s) - self.injection(line, t)
    }
}

/// Outage factors: `get(l, k)` is the share of line `k`'s pre-outage flow
/// that moves onto line `l` when `k` trips.
#[derive(Debug, Clone, PartialEq)]
pub struct Lodf {
    lines: usize,
    matrix: Vec<f64>,
    radial: Vec<bool>,
}

impl Lodf {
    pub fn line_count(&self) -> usize {
        self.lines
    }

    /// `None` when `k` is radial or inactive.
    pub fn get(&self, l: usize, k: usize) -> Option<f64> {
        (!self.radial[k]).then(|| self.matrix[l * self.lines + k])
    }

    /// True for lines whose outage islands the grid, and for inactive lines.
    pub fn is_radial(&self, k: usize) -> bool {
        self.radial[k]
    }

    pub fn radial_flags(&self) -> &[bool] {
        &self.radial
    }

    /// Post-outage flows predicted from pre-outage `flow` when `k` trips.
    pub fn predict_outage(&self, flow: &[f64], k: usize) -> Option<Vec<f64>> {
        if self.radial[k] {
            return None;
        }
        Some(
            (0..self.lines)
                .map(|l| if l == k { 0.0 } else { flow[l] + self.matrix[l * self.lines + k] * flow[k] })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    pub ptdf: Ptdf,
    pub lodf: Lodf,
}

pub fn compute_ptdf(grid: &PowerGrid, active: &[bool]) -> Result<Ptdf> {
    if active.len() != grid.line_count() {
        return Err(Error::InvalidGrid("active mask length mismatch".into()));
    }
    let island = grid.islands(active);
    let layout = IslandLayout::new(grid, &island);
    let (nl, nb) = (grid.line_count(), grid.bus_count());
    // Reduced-Laplacian inverse embedded at bus positions, zero on references.
    let mut x = vec![0.0; nb * nb];
    for c in 0..layout.members.len() {
        let members = &layout.members[c];
        if members.len() < 2 {
            continue;
        }
        let m = members.len() - 1;
        let inv = Cholesky::factor(layout.reduced_laplacian(grid, active, &island, c), m)?.inverse();
        for &a in members {
            let Some(i) = layout.local[a] else { continue };
            for &b in members {
                if let Some(j) = layout.local[b] {
                    x[a * nb + b] = inv[i * m + j];
                }
            }
        }
    }
    let mut matrix = vec![0.0; nl * nb];
    for (l, line) in grid.lines().iter().enumerate() {
        if !active[l] {
            continue;
        }
        let (f, t) = grid.endpoints(l);
        for b in 0..nb {
            matrix[l * nb + b] = line.susceptance * (x[f * nb + b] - x[t * nb + b]);
        }
    }
    Ok(Ptdf { lines: nl, buses: nb, matrix, island })
}

pub fn compute_lodf(grid: &PowerGrid, active: &[bool], ptdf: &Ptdf) -> Lodf {
    let nl = grid.line_count();
    let mut matrix = vec![0.0; nl * nl];
    let mut radial = vec![false; nl];
    for k in 0..nl {
        let (i, j) = grid.endpoints(k);
        let denom = 1.0 - ptdf.transfer(k, i, j);
        if !active[k] || denom.abs() < RADIAL_TOL {
            radial[k] = true;
            continue;
        }
        for l in 0..nl {
            matrix[l * nl + k] = if l == k { -1.0 } else { ptdf.transfer(l, i, j) / denom };
        }
    }
    Lodf { lines: nl, matrix, radial }
}

pub fn compute_sensitivities(grid: &PowerGrid, active: &[bool]) -> Result<SensitivityMatrices> {
    let ptdf = compute_ptdf(grid, active)?;
    let lodf = compute_lodf(grid, active, &ptdf);
    Ok(SensitivityMatrices { ptdf, lodf })
}
