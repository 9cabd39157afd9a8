//! Cascade exposure: depth-masked attention, weighted by cascade size and
//! averaged over samples, ranked per line.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeSample;
use crate::error::{Error, Result};
use crate::grid::{cascade_depth, CascadeDepths, LineGraph, PowerGrid};
use crate::model::{ForwardTrace, GruGatModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExposureOptions {
    /// When true, self-loop coefficients count like any other edge once
    /// their line is admitted. When false they are left out of the sum.
    pub mask_self_loops: bool,
    pub direction: Direction,
}

impl Default for ExposureOptions {
    fn default() -> Self {
        ExposureOptions { mask_self_loops: true, direction: Direction::Outgoing }
    }
}

/// Which end of a message edge `u -> v` collects its coefficient.
///
/// `Outgoing` credits the sender `u`: a line scores the attention its
/// admitted neighbours pay to it, and the mask applies to the receiving
/// line `v`. This is the index placement of the attention formula, where
/// the coefficient is normalised over the receiver's neighbourhood.
/// `Incoming` credits the receiver `v` and masks on the sender `u`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Incoming,
    #[default]
    Outgoing,
}

/// Per-line scores with 1-based ranks, descending by score, ties broken by
/// ascending line index.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    scores: Vec<f64>,
    ranks: Vec<usize>,
    order: Vec<usize>,
}

impl Ranking {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut ranks = vec![0; scores.len()];
        for (pos, &line) in order.iter().enumerate() {
            ranks[line] = pos + 1;
        }
        Ranking { scores, ranks, order }
    }

    /// Builds a ranking from an explicit best-first line order; scores are
    /// `L - position`.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        let n = order.len();
        let mut scores = vec![f64::NAN; n];
        for (pos, &line) in order.iter().enumerate() {
            if line >= n || !scores[line].is_nan() {
                return Err(Error::Metric("order is not a permutation".into()));
            }
            scores[line] = (n - pos) as f64;
        }
        Ok(Ranking::from_scores(scores))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// 1-based rank of each line.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn rank(&self, line: usize) -> usize {
        self.ranks[line]
    }

    /// Line indices, best first.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn top(&self, n: usize) -> &[usize] {
        &self.order[..n.min(self.order.len())]
    }

    /// `line_id,<score_column>,rank` rows, plus a leading `method` column
    /// when given.
    pub fn to_csv(&self, grid: &PowerGrid, score_column: &str, method: Option<&str>) -> String {
        let mut out = String::new();
        if method.is_some() {
            out.push_str("method,");
        }
        let _ = writeln!(out, "line_id,{score_column},rank");
        for &line in &self.order {
            if let Some(m) = method {
                let _ = write!(out, "{m},");
            }
            let _ = writeln!(out, "{},{},{}", grid.lines()[line].id, self.scores[line], self.ranks[line]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureRanking {
    pub ranking: Ranking,
    pub sample_count: usize,
}

impl ExposureRanking {
    pub fn to_csv(&self, grid: &PowerGrid) -> String {
        self.ranking.to_csv(grid, "exposure_score", None)
    }
}

/// One sample's contribution: cascade-size weight and masked attention.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleExposure {
    pub weight: f64,
    pub attention: Vec<f64>,
}

/// Edges admitted at step `t`: those whose source line has depth `<= t`.
pub fn mask_edges(lg: &LineGraph, depths: &CascadeDepths, t: usize) -> Vec<bool> {
    lg.edges().iter().map(|e| depths.get(e.source).admitted_at(t)).collect()
}

/// `a_v = sum_{t=0}^{G-2} sum_{(u,v) admitted at t} mean_k alpha^(k,t)_{uv}`,
/// with the roles of the two ends set by `opts.direction`.
pub fn masked_incoming_attention(
    trace: &ForwardTrace,
    lg: &LineGraph,
    depths: &CascadeDepths,
    sample: &CascadeSample,
    opts: ExposureOptions,
) -> Result<Vec<f64>> {
    let n = lg.node_count();
    let steps = sample.max_iteration().saturating_sub(1) as usize;
    if trace.node_count != n || sample.line_count() != n || depths.len() != n {
        return Err(Error::InvalidSample(format!(
            "trace has {} nodes, sample {}, depths {}, line graph {n}",
            trace.node_count,
            sample.line_count(),
            depths.len()
        )));
    }
    if trace.edge_count != lg.edge_count() || trace.steps.len() != steps {
        return Err(Error::InvalidSample(format!(
            "trace has {} steps over {} edges, sample needs {steps} steps over {}",
            trace.steps.len(),
            trace.edge_count,
            lg.edge_count()
        )));
    }
    let mut a = vec![0.0; n];
    for (t, step) in trace.steps.iter().enumerate() {
        for (e, edge) in lg.edges().iter().enumerate() {
            if edge.is_self_loop() && !opts.mask_self_loops {
                continue;
            }
            let (masked, credited) = match opts.direction {
                Direction::Incoming => (edge.source, edge.target),
                Direction::Outgoing => (edge.target, edge.source),
            };
            if depths.get(masked).admitted_at(t) {
                a[credited] += step.alpha_mean[e];
            }
        }
    }
    Ok(a)
}

/// Number of lines that failed after the initial iteration.
pub fn cascade_weight(sample: &CascadeSample) -> usize {
    sample.labels().iter().filter(|&&g| g > 1).count()
}

/// Runs the frozen model on each sample and returns its contribution.
pub fn exposure_contributions(
    model: &GruGatModel,
    samples: &[CascadeSample],
    lg: &LineGraph,
    opts: ExposureOptions,
) -> Result<Vec<SampleExposure>> {
    samples
        .iter()
        .map(|s| {
            let depths = cascade_depth(lg, &s.initial_failures())?;
            let (_, trace) = model.forward(s, lg)?;
            let attention = masked_incoming_attention(&trace, lg, &depths, s, opts)?;
            Ok(SampleExposure { weight: cascade_weight(s) as f64, attention })
        })
        .collect()
}

/// `A_v = sum_k w_k a_v^(k) / sum_k w_k`, ranked.
pub fn aggregate(contributions: &[SampleExposure]) -> Result<ExposureRanking> {
    let total: f64 = contributions.iter().map(|c| c.weight).sum();
    if total <= 0.0 {
        return Err(Error::InvalidSample("no propagating samples".into()));
    }
    let n = contributions[0].attention.len();
    let mut score = vec![0.0; n];
    for c in contributions {
        if c.attention.len() != n {
            return Err(Error::InvalidSample("samples disagree on line count".into()));
        }
        for (s, a) in score.iter_mut().zip(&c.attention) {
            *s += c.weight * a;
        }
    }
    score.iter_mut().for_each(|s| *s /= total);
    Ok(ExposureRanking { ranking: Ranking::from_scores(score), sample_count: contributions.len() })
}

pub fn aggregate_exposure(
    model: &GruGatModel,
    samples: &[CascadeSample],
    lg: &LineGraph,
    opts: ExposureOptions,
) -> Result<ExposureRanking> {
    aggregate(&exposure_contributions(model, samples, lg, opts)?)
}
