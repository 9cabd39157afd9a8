//! Static rankings that ignore cascade data: electric betweenness and a
//! PageRank over the outage-distribution-factor graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::Ranking;
use crate::grid::PowerGrid;
use crate::powerflow::{compute_ptdf, compute_sensitivities};

pub const DEFAULT_DAMPING: f64 = 0.85;
pub const PAGERANK_TOL: f64 = 1e-12;
pub const PAGERANK_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineMethod {
    #[serde(rename = "EB")]
    ElectricBetweenness,
    #[serde(rename = "PR")]
    BodfPageRank,
}

impl BaselineMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::ElectricBetweenness => "EB",
            BaselineMethod::BodfPageRank => "PR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineScores {
    pub method: BaselineMethod,
    pub ranking: Ranking,
}

impl BaselineScores {
    pub fn to_csv(&self, grid: &PowerGrid) -> String {
        self.ranking.to_csv(grid, "score", Some(self.method.as_str()))
    }
}

fn intact(grid: &PowerGrid) -> Result<Vec<bool>> {
    let active = vec![true; grid.line_count()];
    let islands = grid.islands(&active);
    if islands.iter().any(|&i| i != islands[0]) {
        return Err(Error::InvalidGrid(format!("{} is not connected", grid.name())));
    }
    Ok(active)
}

/// Mean absolute flow per line over unit transfers between every unordered
/// bus pair.
pub fn electric_betweenness(grid: &PowerGrid) -> Result<BaselineScores> {
    let active = intact(grid)?;
    let ptdf = compute_ptdf(grid, &active)?;
    let (n, l) = (grid.bus_count(), grid.line_count());
    let pairs = (n * (n - 1) / 2) as f64;
    let scores = (0..l)
        .map(|line| {
            let mut total = 0.0;
            for s in 0..n {
                for t in s + 1..n {
                    total += ptdf.transfer(line, s, t).abs();
                }
            }
            total / pairs
        })
        .collect();
    Ok(BaselineScores { method: BaselineMethod::ElectricBetweenness, ranking: Ranking::from_scores(scores) })
}

/// Column-stochastic transition matrix: column `k` spreads over the lines
/// that absorb its flow when it trips, in proportion to `|LODF[l][k]|`.
/// Radial or all-zero columns become uniform.
pub fn bodf_transition(grid: &PowerGrid) -> Result<Vec<Vec<f64>>> {
    let active = intact(grid)?;
    let lodf = compute_sensitivities(grid, &active)?.lodf;
    let l = grid.line_count();
    let mut cols = Vec::with_capacity(l);
    for k in 0..l {
        let col: Option<Vec<f64>> = (!lodf.is_radial(k)).then(|| {
            (0..l).map(|r| if r == k { 0.0 } else { lodf.get(r, k).unwrap_or(0.0).abs() }).collect()
        });
        let col = match col {
            Some(c) if c.iter().sum::<f64>() > 0.0 => {
                let s: f64 = c.iter().sum();
                c.into_iter().map(|x| x / s).collect()
            }
            _ => vec![1.0 / l as f64; l],
        };
        cols.push(col);
    }
    Ok(cols)
}

/// Stationary vector of `damping * M + (1 - damping) / L`.
pub fn bodf_pagerank(grid: &PowerGrid, damping: f64) -> Result<BaselineScores> {
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::Config(format!("damping {damping} outside [0, 1)")));
    }
    let cols = bodf_transition(grid)?;
    let l = cols.len();
    let teleport = (1.0 - damping) / l as f64;
    let mut x = vec![1.0 / l as f64; l];
    for _ in 0..PAGERANK_MAX_ITER {
        let mut next = vec![teleport; l];
        for (k, col) in cols.iter().enumerate() {
            let xk = damping * x[k];
            for (n, m) in next.iter_mut().zip(col) {
                *n += m * xk;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let residual: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if residual < PAGERANK_TOL {
            return Ok(BaselineScores { method: BaselineMethod::BodfPageRank, ranking: Ranking::from_scores(x) });
        }
    }
    Err(Error::Convergence(format!("PageRank did not converge in {PAGERANK_MAX_ITER} iterations")))
}
