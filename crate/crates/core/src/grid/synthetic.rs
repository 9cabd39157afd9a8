use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bus, Line, PowerGrid};
use crate::error::{Error, Result};
use crate::powerflow::solve_dc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridFamily {
    /// Buses on a ring with random local chords.
    RingMesh,
    /// A meshed backbone of high-degree hubs, each feeding a cluster of
    /// laterally linked spoke buses.
    HubSpoke,
}

impl GridFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            GridFamily::RingMesh => "ring-mesh",
            GridFamily::HubSpoke => "hub-spoke",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_buses: usize,
    pub family: GridFamily,
    /// Line capacity as a multiple of its base-case flow magnitude.
    pub capacity_factor: f64,
    pub seed: u64,
}

/// Capacity floor as a fraction of the largest base-case flow.
const CAPACITY_FLOOR: f64 = 0.05;

/// Deterministic in `spec`. Capacities are `capacity_factor * |base flow|`
/// plus a floor, so the intact grid is feasible but outages can overload
/// neighbouring lines.
pub fn generate_synthetic_grid(spec: &SyntheticSpec) -> Result<PowerGrid> {
    if spec.n_buses < 3 {
        return Err(Error::InvalidGrid(format!("n_buses must be >= 3, got {}", spec.n_buses)));
    }
    if !(spec.capacity_factor.is_finite() && spec.capacity_factor > 1.0) {
        return Err(Error::InvalidGrid(format!(
            "capacity_factor must be > 1, got {}",
            spec.capacity_factor
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_buses;
    let (pairs, generators) = match spec.family {
        GridFamily::RingMesh => ring_mesh(n, &mut rng),
        GridFamily::HubSpoke => hub_spoke(n, &mut rng),
    };

    let is_gen: HashSet<usize> = generators.iter().copied().collect();
    let mut load = vec![0.0; n];
    for (i, l) in load.iter_mut().enumerate() {
        if !is_gen.contains(&i) || rng.random_bool(0.3) {
            *l = rng.random_range(0.2..1.5);
        }
    }
    let total_load: f64 = load.iter().sum();
    let weights: Vec<f64> = generators.iter().map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut generation = vec![0.0; n];
    for (&g, w) in generators.iter().zip(&weights) {
        generation[g] = total_load * w / wsum;
    }
    // Put the rounding residue on the first generator so the base case balances.
    let residue = total_load - generation.iter().sum::<f64>();
    generation[generators[0]] += residue;

    let buses: Vec<Bus> = (0..n).map(|i| Bus::new(i as u32, generation[i], load[i])).collect();
    let lines: Vec<Line> = pairs
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| Line::new(k as u32, a as u32, b as u32, rng.random_range(5.0..20.0), 1.0))
        .collect();

    let name = format!("{}-{}-{}", spec.family.as_str(), n, spec.seed);
    let draft = PowerGrid::new(name.clone(), buses.clone(), lines.clone())?;
    let all = vec![true; draft.line_count()];
    let base = solve_dc(&draft, &all)?;
    let max_flow = base.flow.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    let floor = (CAPACITY_FLOOR * max_flow).max(1e-3);
    let lines = lines
        .into_iter()
        .zip(&base.flow)
        .map(|(mut l, f)| {
            l.capacity = spec.capacity_factor * f.abs() + floor;
            l
        })
        .collect();
    PowerGrid::new(name, buses, lines)
}

fn push_unique(pairs: &mut Vec<(usize, usize)>, seen: &mut HashSet<(usize, usize)>, a: usize, b: usize) -> bool {
    if a == b {
        return false;
    }
    let key = (a.min(b), a.max(b));
    if seen.insert(key) {
        pairs.push((a, b));
        true
    } else {
        false
    }
}

fn ring_mesh(n: usize, rng: &mut ChaCha8Rng) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..n {
        push_unique(&mut pairs, &mut seen, i, (i + 1) % n);
    }
    let chords = n / 3;
    let reach = (n / 4).max(2);
    let mut attempts = 0;
    let mut added = 0;
    while added < chords && attempts < 50 * n {
        attempts += 1;
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(2..=reach)) % n;
        if push_unique(&mut pairs, &mut seen, a, b) {
            added += 1;
        }
    }
    let mut buses: Vec<usize> = (0..n).collect();
    buses.shuffle(rng);
    let n_gen = (n / 4).max(1);
    let mut generators = buses[..n_gen].to_vec();
    generators.sort_unstable();
    (pairs, generators)
}

fn hub_spoke(n: usize, rng: &mut ChaCha8Rng) -> (Vec<(usize, usize)>, Vec<usize>) {
    let hubs = (n / 8).clamp(2, n - 1);
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for h in 0..hubs {
        push_unique(&mut pairs, &mut seen, h, (h + 1) % hubs);
    }
    if hubs >= 5 {
        for _ in 0..hubs / 3 {
            let a = rng.random_range(0..hubs);
            let b = rng.random_range(0..hubs);
            push_unique(&mut pairs, &mut seen, a, b);
        }
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); hubs];
    for s in hubs..n {
        let h = rng.random_range(0..hubs);
        clusters[h].push(s);
        push_unique(&mut pairs, &mut seen, h, s);
    }
    // Lateral links between consecutive spokes of a cluster.
    for cluster in &clusters {
        for w in cluster.windows(2) {
            if rng.random_bool(0.6) {
                push_unique(&mut pairs, &mut seen, w[0], w[1]);
            }
        }
    }
    // A few ties between neighbouring clusters.
    for h in 0..hubs {
        let next = (h + 1) % hubs;
        if let (Some(&a), Some(&b)) = (clusters[h].last(), clusters[next].first()) {
            if rng.random_bool(0.5) {
                push_unique(&mut pairs, &mut seen, a, b);
            }
        }
    }
    let mut generators: Vec<usize> = (0..hubs).collect();
    let spokes: Vec<usize> = (hubs..n).collect();
    for &s in spokes.choose_multiple(rng, (n - hubs) / 10) {
        generators.push(s);
    }
    generators.sort_unstable();
    (pairs, generators)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BALANCE_TOL;

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec { n_buses: 3, family: GridFamily::RingMesh, capacity_factor: 1.2, seed: 7 };
        let a = generate_synthetic_grid(&spec).unwrap();
        let b = generate_synthetic_grid(&spec).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.lines().iter().zip(b.lines()) {
            assert_eq!(x.capacity.to_bits(), y.capacity.to_bits());
        }
    }

    #[test]
    fn balanced_connected_and_feasible() {
        for family in [GridFamily::RingMesh, GridFamily::HubSpoke] {
            for seed in 0..20 {
                for n in [3, 4, 10, 40] {
                    let spec = SyntheticSpec { n_buses: n, family, capacity_factor: 1.2, seed };
                    let g = generate_synthetic_grid(&spec).unwrap();
                    let gen: f64 = g.buses().iter().map(|b| b.generation).sum();
                    let load: f64 = g.buses().iter().map(|b| b.load).sum();
                    assert!((gen - load).abs() <= BALANCE_TOL);
                    assert!(!g.has_parallel_lines());
                    let sol = solve_dc(&g, &vec![true; g.line_count()]).unwrap();
                    for (f, l) in sol.flow.iter().zip(g.lines()) {
                        assert!(f.abs() < l.capacity);
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut spec = SyntheticSpec { n_buses: 2, family: GridFamily::HubSpoke, capacity_factor: 1.2, seed: 0 };
        assert!(generate_synthetic_grid(&spec).is_err());
        spec.n_buses = 10;
        spec.capacity_factor = 1.0;
        assert!(generate_synthetic_grid(&spec).is_err());
    }
}
