//! Ground-truth vulnerability from held-out cascades and the ranking
//! metrics computed against it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeSample;
use crate::error::{Error, Result};
use crate::exposure::{aggregate, exposure_contributions, ExposureOptions, Ranking};
use crate::grid::LineGraph;
use crate::model::GruGatModel;

/// Which failure population a vulnerability value counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VulBin {
    Total,
    Shallow,
    Deep,
}

impl VulBin {
    pub fn as_str(self) -> &'static str {
        match self {
            VulBin::Total => "total",
            VulBin::Shallow => "shallow",
            VulBin::Deep => "deep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityTable {
    pub total: Vec<f64>,
    pub shallow: Vec<f64>,
    pub deep: Vec<f64>,
    /// Mean fraction of lines failing beyond the first iteration.
    pub avg_scale: f64,
    pub avg_depth: f64,
    pub cutoff: u32,
    pub sample_count: usize,
}

impl VulnerabilityTable {
    pub fn values(&self, bin: VulBin) -> &[f64] {
        match bin {
            VulBin::Total => &self.total,
            VulBin::Shallow => &self.shallow,
            VulBin::Deep => &self.deep,
        }
    }

    pub fn line_count(&self) -> usize {
        self.total.len()
    }
}

/// `floor(mean G)` over the pool.
pub fn depth_cutoff(samples: &[CascadeSample]) -> Result<u32> {
    if samples.is_empty() {
        return Err(Error::Metric("empty held-out pool".into()));
    }
    let mean = samples.iter().map(|s| s.max_iteration() as f64).sum::<f64>() / samples.len() as f64;
    Ok(mean.floor() as u32)
}

/// Per-line fractions of cascades in which the line fails at `g >= 2`,
/// split at `cutoff` into shallow (`2 <= g <= cutoff`) and deep (`g > cutoff`).
pub fn ground_truth_vulnerability(samples: &[CascadeSample], cutoff: u32) -> Result<VulnerabilityTable> {
    let first = samples.first().ok_or_else(|| Error::Metric("empty held-out pool".into()))?;
    let l = first.line_count();
    let (mut total, mut shallow, mut deep) = (vec![0usize; l], vec![0usize; l], vec![0usize; l]);
    let (mut scale, mut depth) = (0.0, 0.0);
    for s in samples {
        if s.line_count() != l {
            return Err(Error::Metric("held-out samples disagree on line count".into()));
        }
        for (v, &g) in s.labels().iter().enumerate() {
            if g >= 2 {
                total[v] += 1;
                if g <= cutoff {
                    shallow[v] += 1;
                } else {
                    deep[v] += 1;
                }
            }
        }
        scale += s.propagated_count() as f64 / l as f64;
        depth += s.max_iteration() as f64;
    }
    let n = samples.len() as f64;
    let frac = |c: Vec<usize>| c.into_iter().map(|x| x as f64 / n).collect();
    Ok(VulnerabilityTable {
        total: frac(total),
        shallow: frac(shallow),
        deep: frac(deep),
        avg_scale: scale / n,
        avg_depth: depth / n,
        cutoff,
        sample_count: samples.len(),
    })
}

/// `ceil(tau / 100 * L)`, at least one line.
pub fn top_count(tau_percent: f64, lines: usize) -> Result<usize> {
    if !(tau_percent > 0.0 && tau_percent <= 100.0) {
        return Err(Error::Metric(format!("tau {tau_percent}% outside (0, 100]")));
    }
    Ok(((tau_percent * lines as f64) / 100.0).ceil().max(1.0) as usize)
}

/// Mean of `values` over the top `ceil(tau% * L)` lines of `ranking`.
pub fn mean_top_tau(ranking: &Ranking, values: &[f64], tau_percent: f64) -> Result<f64> {
    if ranking.len() != values.len() || values.is_empty() {
        return Err(Error::Metric(format!(
            "ranking covers {} lines, table has {}",
            ranking.len(),
            values.len()
        )));
    }
    let n = top_count(tau_percent, values.len())?;
    Ok(ranking.top(n).iter().map(|&v| values[v]).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighExposureSet {
    pub members: Vec<usize>,
    pub threshold: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Lines whose value strictly exceeds the median over lines that failed at
/// least once.
pub fn high_exposure_set(values: &[f64]) -> Result<HighExposureSet> {
    let mut failed: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).collect();
    if failed.is_empty() {
        return Err(Error::Metric("no line failed in any held-out cascade".into()));
    }
    failed.sort_by(f64::total_cmp);
    let threshold = median(&failed);
    let members = (0..values.len()).filter(|&v| values[v] > threshold).collect();
    Ok(HighExposureSet { members, threshold })
}

/// `(1/|E|) sum_{v in E} r(v) / L`.
pub fn mean_percentile_rank(ranking: &Ranking, set: &HighExposureSet) -> Result<f64> {
    if set.members.is_empty() {
        return Err(Error::Metric("high-exposure set is empty".into()));
    }
    let rank_sum: usize = set.members.iter().map(|&v| ranking.rank(v)).sum();
    Ok(rank_sum as f64 / (ranking.len() * set.members.len()) as f64)
}

/// Kendall rank correlation between two rankings of the same lines.
pub fn kendall_tau(a: &Ranking, b: &Ranking) -> Result<f64> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return Err(Error::Metric("kendall tau needs two rankings of the same >= 2 lines".into()));
    }
    let (ra, rb) = (a.ranks(), b.ranks());
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            let x = (ra[i] as i64 - ra[j] as i64).signum();
            let y = (rb[i] as i64 - rb[j] as i64).signum();
            score += x * y;
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// Unweighted mean of per-class F1 over classes present in `truth` or
/// `pred`.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Metric("macro-F1 needs equal-length non-empty label vectors".into()));
    }
    let classes = truth.iter().chain(pred).copied().max().unwrap_or(0) + 1;
    let (mut tp, mut fp, mut fnn) = (vec![0usize; classes], vec![0usize; classes], vec![0usize; classes]);
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let f1: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fnn[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fnn[c]) as f64)
        .collect();
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub sample_count: usize,
    pub top10: f64,
    /// Kendall tau against the ranking from the largest sample count.
    pub kendall_vs_max: f64,
}

/// Exposure rankings from the first `n` pool samples for each `n` in
/// `ns_list`, scored by top-10% mean vulnerability.
pub fn sample_efficiency_sweep(
    model: &GruGatModel,
    lg: &LineGraph,
    pool: &[CascadeSample],
    vul: &[f64],
    ns_list: &[usize],
    opts: ExposureOptions,
) -> Result<Vec<EfficiencyPoint>> {
    let max = ns_list.iter().copied().max().ok_or_else(|| Error::Metric("empty N_s list".into()))?;
    if pool.len() < max {
        return Err(Error::Metric(format!("pool has {} samples, sweep needs {max}", pool.len())));
    }
    let contributions = exposure_contributions(model, &pool[..max], lg, opts)?;
    let full = aggregate(&contributions)?.ranking;
    ns_list
        .iter()
        .map(|&n| {
            let r = aggregate(&contributions[..n])?.ranking;
            Ok(EfficiencyPoint { sample_count: n, top10: mean_top_tau(&r, vul, 10.0)?, kendall_vs_max: kendall_tau(&r, &full)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub grid: String,
    pub method: String,
    pub metric: String,
    pub parameter: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(grid: &str, method: &str, metric: &str, parameter: impl ToString, value: f64) -> Self {
        MetricRow {
            grid: grid.into(),
            method: method.into(),
            metric: metric.into(),
            parameter: parameter.to_string(),
            value,
        }
    }
}

pub const METRIC_HEADER: &str = "grid,method,metric,parameter,value";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRIC_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.grid, r.method, r.metric, r.parameter, r.value);
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Parse { file: "metrics.csv".into(), row: i + 2, msg: e.to_string() }))
        .collect()
}
