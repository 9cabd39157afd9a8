//! DC power flow on the operational subgrid, with per-island rebalancing.

mod cholesky;
mod sensitivity;

use std::fmt::Write as _;

pub use cholesky::Cholesky;
pub use sensitivity::{compute_lodf, compute_ptdf, compute_sensitivities, Lodf, Ptdf, SensitivityMatrices, RADIAL_TOL};

use crate::error::{Error, Result};
use crate::grid::PowerGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    /// Voltage angle per bus, radians.
    pub theta: Vec<f64>,
    /// Signed from→to flow per line; zero on inactive lines.
    pub flow: Vec<f64>,
    /// Component label per bus.
    pub island: Vec<usize>,
    /// Net injection per bus after rebalancing.
    pub injection: Vec<f64>,
    pub shed_load: Vec<f64>,
    pub curtailed_gen: Vec<f64>,
}

impl FlowSolution {
    /// `line_id,flow,capacity,loading_ratio` rows for debugging.
    pub fn to_csv(&self, grid: &PowerGrid) -> String {
        let mut out = String::from("line_id,flow,capacity,loading_ratio\n");
        for (l, f) in grid.lines().iter().zip(&self.flow) {
            let _ = writeln!(out, "{},{},{},{}", l.id, f, l.capacity, f.abs() / l.capacity);
        }
        out
    }
}

/// Per-island bus membership, with buses in ascending position order and
/// the angle reference (lowest bus id) identified.
pub(crate) struct IslandLayout {
    pub members: Vec<Vec<usize>>,
    pub reference: Vec<usize>,
    /// Position of each bus inside its island's reduced system, `None` for
    /// references.
    pub local: Vec<Option<usize>>,
}

impl IslandLayout {
    pub fn new(grid: &PowerGrid, island: &[usize]) -> Self {
        let count = island.iter().max().map_or(0, |m| m + 1);
        let mut members = vec![Vec::new(); count];
        for (b, &c) in island.iter().enumerate() {
            members[c].push(b);
        }
        let buses = grid.buses();
        let reference: Vec<usize> = members
            .iter()
            .map(|m| *m.iter().min_by_key(|&&b| buses[b].id).expect("islands are non-empty"))
            .collect();
        let mut local = vec![None; island.len()];
        for (c, m) in members.iter().enumerate() {
            let mut k = 0;
            for &b in m {
                if b != reference[c] {
                    local[b] = Some(k);
                    k += 1;
                }
            }
        }
        IslandLayout { members, reference, local }
    }

    /// Reduced susceptance Laplacian of island `c`.
    pub fn reduced_laplacian(&self, grid: &PowerGrid, active: &[bool], island: &[usize], c: usize) -> Vec<f64> {
        let n = self.members[c].len() - 1;
        let mut lap = vec![0.0; n * n];
        for (l, line) in grid.lines().iter().enumerate() {
            if !active[l] {
                continue;
            }
            let (f, t) = grid.endpoints(l);
            if island[f] != c {
                continue;
            }
            let b = line.susceptance;
            let (lf, lt) = (self.local[f], self.local[t]);
            if let Some(i) = lf {
                lap[i * n + i] += b;
            }
            if let Some(j) = lt {
                lap[j * n + j] += b;
            }
            if let (Some(i), Some(j)) = (lf, lt) {
                lap[i * n + j] -= b;
                lap[j * n + i] -= b;
            }
        }
        lap
    }
}

/// Solves the DC power flow over the lines marked in `active`.
///
/// Each island is rebalanced on its own: surplus generation is scaled down
/// to the island load, a deficit sheds load pro rata, and an island without
/// generation or without load carries no flow. Angles are referenced to the
/// lowest-id bus of each island.
pub fn solve_dc(grid: &PowerGrid, active: &[bool]) -> Result<FlowSolution> {
    if active.len() != grid.line_count() {
        return Err(Error::InvalidGrid(format!(
            "active mask has {} entries for {} lines",
            active.len(),
            grid.line_count()
        )));
    }
    let island = grid.islands(active);
    let layout = IslandLayout::new(grid, &island);
    let buses = grid.buses();
    let n_islands = layout.members.len();

    let mut injection = vec![0.0; buses.len()];
    let mut shed_load = vec![0.0; n_islands];
    let mut curtailed_gen = vec![0.0; n_islands];
    for (c, members) in layout.members.iter().enumerate() {
        let gen: f64 = members.iter().map(|&b| buses[b].generation).sum();
        let load: f64 = members.iter().map(|&b| buses[b].load).sum();
        let (gscale, lscale) = if gen <= 0.0 || load <= 0.0 {
            shed_load[c] = load;
            curtailed_gen[c] = gen;
            (0.0, 0.0)
        } else if gen > load {
            curtailed_gen[c] = gen - load;
            (load / gen, 1.0)
        } else if load > gen {
            shed_load[c] = load - gen;
            (1.0, gen / load)
        } else {
            (1.0, 1.0)
        };
        for &b in members {
            injection[b] = buses[b].generation * gscale - buses[b].load * lscale;
        }
        // Scaling leaves rounding residue; the reference bus absorbs it.
        let residue: f64 = members.iter().map(|&b| injection[b]).sum();
        injection[layout.reference[c]] -= residue;
    }

    let mut theta = vec![0.0; buses.len()];
    for c in 0..n_islands {
        let members = &layout.members[c];
        if members.len() < 2 || members.iter().all(|&b| injection[b] == 0.0) {
            continue;
        }
        let lap = layout.reduced_laplacian(grid, active, &island, c);
        let chol = Cholesky::factor(lap, members.len() - 1)?;
        let mut rhs = vec![0.0; members.len() - 1];
        for &b in members {
            if let Some(i) = layout.local[b] {
                rhs[i] = injection[b];
            }
        }
        chol.solve_in_place(&mut rhs);
        for &b in members {
            if let Some(i) = layout.local[b] {
                theta[b] = rhs[i];
            }
        }
    }

    let flow = grid
        .lines()
        .iter()
        .enumerate()
        .map(|(l, line)| {
            if !active[l] {
                return 0.0;
            }
            let (f, t) = grid.endpoints(l);
            line.susceptance * (theta[f] - theta[t])
        })
        .collect();

    Ok(FlowSolution { theta, flow, island, injection, shed_load, curtailed_gen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::*;
    use crate::grid::{generate_synthetic_grid, Bus, GridFamily, Line, SyntheticSpec};

    fn all(grid: &PowerGrid) -> Vec<bool> {
        vec![true; grid.line_count()]
    }

    #[test]
    fn two_bus_single_line() {
        let g = two_bus(1.0, 1.0);
        let s = solve_dc(&g, &all(&g)).unwrap();
        assert!((s.flow[0] - 1.0).abs() < 1e-14);
        assert!((s.theta[0] - s.theta[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn triangle_split() {
        // Reduced system with bus 1 as reference: [2 -1; -1 2] [t2; t3] = [-1; 0]
        // gives t2 = -2/3, t3 = -1/3.
        let g = triangle([1.0, -1.0, 0.0], 1.0, 1.0);
        let s = solve_dc(&g, &all(&g)).unwrap();
        assert!((s.flow[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((s.flow[1] + 1.0 / 3.0).abs() < 1e-14);
        assert!((s.flow[2] + 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn load_only_island_is_shed() {
        // 1(gen) -- 2(load) -- 3(load); removing line 2-3 islands bus 3.
        let g = PowerGrid::new(
            "spur",
            vec![Bus::new(1, 2.0, 0.0), Bus::new(2, 0.0, 1.0), Bus::new(3, 0.0, 1.0)],
            vec![Line::new(0, 1, 2, 1.0, 5.0), Line::new(1, 2, 3, 1.0, 5.0)],
        )
        .unwrap();
        let s = solve_dc(&g, &[true, false]).unwrap();
        let c = s.island[2];
        assert_eq!(s.shed_load[c], 1.0);
        assert_eq!(s.injection[2], 0.0);
        assert_eq!(s.flow[1], 0.0);
        // The surviving island curtails its surplus generation.
        assert!((s.flow[0] - 1.0).abs() < 1e-12);
        assert!((s.curtailed_gen[s.island[0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_equivariance() {
        let spec = SyntheticSpec { n_buses: 15, family: GridFamily::RingMesh, capacity_factor: 1.5, seed: 4 };
        let g = generate_synthetic_grid(&spec).unwrap();
        let scaled = PowerGrid::new(
            "scaled",
            g.buses().iter().map(|b| Bus::new(b.id, 3.0 * b.generation, 3.0 * b.load)).collect(),
            g.lines().to_vec(),
        )
        .unwrap();
        let mut active = all(&g);
        active[2] = false;
        let a = solve_dc(&g, &active).unwrap();
        let b = solve_dc(&scaled, &active).unwrap();
        for (x, y) in a.flow.iter().zip(&b.flow) {
            assert!((3.0 * x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_dump() {
        let g = two_bus(1.0, 1.0);
        let s = solve_dc(&g, &all(&g)).unwrap();
        assert_eq!(s.to_csv(&g), "line_id,flow,capacity,loading_ratio\n0,1,10,0.1\n");
    }
}
