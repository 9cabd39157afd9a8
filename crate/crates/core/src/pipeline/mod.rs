//! End-to-end experiment: grid generation, dataset build, cross-grid
//! training, zero-shot exposure, baselines, evaluation and report.
//!
//! Every stage reads its inputs from, and writes its outputs under, one
//! output directory whose root holds the run manifest.

mod config;
mod manifest;
pub mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{
    DatasetSection, EvaluationSection, ExperimentConfig, ExposureSection, GridRole, GridSource, ResolvedGrid,
};
pub use manifest::{ArtifactRecord, RunManifest, SeedRecord, MANIFEST_NAME};

use crate::baselines::{bodf_pagerank, electric_betweenness};
use crate::cascade::{build_holdout_pool, build_training_dataset, Dataset, DatasetRole, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::exposure::{aggregate_exposure, Ranking};
use crate::grid::{build_line_graph, generate_synthetic_grid, load_grid, save_grid, PowerGrid, SyntheticSpec};
use crate::metrics::{
    depth_cutoff, ground_truth_vulnerability, high_exposure_set, macro_f1, mean_percentile_rank, mean_top_tau,
    metrics_csv, parse_metrics_csv, sample_efficiency_sweep, MetricRow, VulBin, VulnerabilityTable,
};
use crate::model::{load_checkpoint_expecting, save_checkpoint, train, GruGatModel, ModelConfig, SampleGraphs};
use crate::seeds::{derive_seed, TAG_EXPOSURE, TAG_GRIDS, TAG_HOLDOUT, TAG_MODEL, TAG_TRAINING};

pub const TRAINING_DATASET_DIR: &str = "dataset/training";
pub const CHECKPOINT_PATH: &str = "model/model.ckpt";
pub const HISTORY_PATH: &str = "model/history.csv";
pub const METRICS_PATH: &str = "metrics/metrics.csv";

/// Ranking methods in report order.
pub const METHODS: [&str; 3] = ["exposure", "EB", "PR"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GridGen,
    DatasetBuild,
    Train,
    Exposure,
    Baseline,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GridGen,
        Stage::DatasetBuild,
        Stage::Train,
        Stage::Exposure,
        Stage::Baseline,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GridGen => "grid-gen",
            Stage::DatasetBuild => "dataset-build",
            Stage::Train => "train",
            Stage::Exposure => "exposure",
            Stage::Baseline => "baseline",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub seconds: f64,
    pub artifacts: Vec<String>,
    pub notes: Vec<String>,
}

pub fn grid_dir(role: GridRole, name: &str) -> String {
    format!("grids/{}/{name}", role.as_str())
}

pub fn exposure_ranking_path(grid: &str) -> String {
    format!("exposure/{grid}/ranking.csv")
}

pub fn baseline_path(grid: &str, method: &str) -> String {
    format!("baselines/{grid}/{}.csv", method.to_lowercase())
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    stage: Stage,
    manifest: &'a mut RunManifest,
    written: Vec<String>,
    notes: Vec<String>,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, hint: hint.into() })
        }
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        self.manifest.record_artifact(self.out, self.stage.as_str(), rel)?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn record_dir(&mut self, rel: &str) -> Result<()> {
        let dir = self.path(rel);
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for n in names {
            self.record(&format!("{rel}/{n}"))?;
        }
        Ok(())
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.record(rel)
    }

    fn load_grid(&self, g: &ResolvedGrid) -> Result<PowerGrid> {
        let rel = grid_dir(g.role, &g.name);
        let dir = self.require(&rel, "grid not generated; run the grid-gen stage first")?;
        load_grid(dir)
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: derive_seed(self.cfg.seed, TAG_MODEL, 0), ..self.cfg.model.clone() }
    }

    fn load_model(&self) -> Result<GruGatModel> {
        load_checkpoint_expecting(self.path(CHECKPOINT_PATH), &self.model_config())
    }

    fn load_dataset(&self, rel: &str, hint: &str) -> Result<Dataset> {
        self.require(&format!("{rel}/{MANIFEST_FILE}"), hint)?;
        Dataset::load(self.path(rel))
    }
}

pub struct Pipeline {
    config: ExperimentConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config, out: out.into() })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    fn open_manifest(&self) -> Result<RunManifest> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let hash = self.config.hash();
        if !self.out.join(MANIFEST_NAME).exists() {
            return Ok(RunManifest::new(hash, self.config.seed));
        }
        let m = RunManifest::load(&self.out)?;
        if m.config_hash != hash {
            return Err(Error::Config(format!(
                "{} holds a run with config hash {}, this config hashes to {hash}; use a fresh --out",
                self.out.display(),
                m.config_hash
            )));
        }
        Ok(m)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageSummary> {
        let start = Instant::now();
        let mut manifest = self.open_manifest()?;
        manifest.artifacts.retain(|_, a| a.stage != stage.as_str());
        let mut ctx = Ctx { cfg: &self.config, out: &self.out, stage, manifest: &mut manifest, written: Vec::new(), notes: Vec::new() };
        match stage {
            Stage::GridGen => grid_gen(&mut ctx)?,
            Stage::DatasetBuild => dataset_build(&mut ctx)?,
            Stage::Train => train_stage(&mut ctx)?,
            Stage::Exposure => exposure_stage(&mut ctx)?,
            Stage::Baseline => baseline_stage(&mut ctx)?,
            Stage::Evaluate => evaluate_stage(&mut ctx)?,
            Stage::Report => report_stage(&mut ctx)?,
        }
        let (artifacts, notes) = (ctx.written, ctx.notes);
        let seconds = start.elapsed().as_secs_f64();
        manifest.timings.insert(stage.as_str().to_string(), seconds);
        manifest.audit_seeds()?;
        manifest.save(&self.out)?;
        Ok(StageSummary { stage, seconds, artifacts, notes })
    }

    pub fn run_all(&self) -> Result<Vec<StageSummary>> {
        Stage::ALL.iter().map(|&s| self.run_stage(s)).collect()
    }
}

fn grid_gen(ctx: &mut Ctx) -> Result<()> {
    for (i, g) in ctx.cfg.grids().iter().enumerate() {
        let grid = match &g.source {
            GridSource::Synthetic { family, n_buses, capacity_factor, seed } => {
                let seed = seed.expect("resolved grids carry a seed");
                ctx.manifest.record_seed(TAG_GRIDS, i as u64, Some(&g.name), seed);
                generate_synthetic_grid(&SyntheticSpec {
                    n_buses: *n_buses,
                    family: *family,
                    capacity_factor: *capacity_factor,
                    seed,
                })?
            }
            GridSource::Import { path } => load_grid(path)?,
        };
        let grid = grid.with_name(g.name.clone());
        let rel = grid_dir(g.role, &g.name);
        save_grid(&grid, ctx.path(&rel))?;
        ctx.record_dir(&rel)?;
        let note = format!("{} grid {}: {} buses, {} lines", g.role.as_str(), g.name, grid.bus_count(), grid.line_count());
        ctx.notes.push(note);
    }
    Ok(())
}

fn training_grids(ctx: &Ctx) -> Result<Vec<PowerGrid>> {
    ctx.cfg.grids_with_role(GridRole::Train).iter().map(|g| ctx.load_grid(g)).collect()
}

fn dataset_build(ctx: &mut Ctx) -> Result<()> {
    let grids = training_grids(ctx)?;
    let seed = derive_seed(ctx.cfg.seed, TAG_TRAINING, 0);
    ctx.manifest.record_seed(TAG_TRAINING, 0, None, seed);
    let ds = build_training_dataset(&grids, &ctx.cfg.dataset_params(), seed)?;
    ds.save(ctx.path(TRAINING_DATASET_DIR))?;
    ctx.record_dir(TRAINING_DATASET_DIR)?;
    let p = &ds.provenance;
    ctx.notes.push(format!(
        "{} training samples ({} single-step and {} over-deep pool cascades discarded)",
        ds.len(),
        p.discarded_shallow,
        p.discarded_deep
    ));
    Ok(())
}

/// Reads only the training dataset and training grids.
fn train_stage(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.load_dataset(TRAINING_DATASET_DIR, "training dataset not found; run the dataset-build stage first")?;
    let graphs: SampleGraphs =
        training_grids(ctx)?.iter().map(|g| (g.name().to_string(), build_line_graph(g))).collect();
    let cfg = ctx.model_config();
    ctx.manifest.record_seed(TAG_MODEL, 0, None, cfg.seed);
    let mut model = GruGatModel::new(cfg)?;
    let history = train(&mut model, &ds.samples, &graphs)?;
    save_checkpoint(&model, ctx.path(CHECKPOINT_PATH))?;
    ctx.record(CHECKPOINT_PATH)?;
    let mut csv = String::from("epoch,train_loss,val_loss,lr_end\n");
    for e in &history.epochs {
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr_end);
    }
    ctx.write(HISTORY_PATH, &csv)?;
    ctx.notes.push(format!(
        "{} epochs, best validation loss {:.5} at epoch {}{}",
        history.epochs.len(),
        history.best_val_loss,
        history.best_epoch,
        if history.stopped_early { " (stopped early)" } else { "" }
    ));
    Ok(())
}

fn pool_params(ctx: &Ctx) -> (usize, usize) {
    (ctx.cfg.dataset.k_min, ctx.cfg.dataset.k_max)
}

fn exposure_samples_dir(grid: &str) -> String {
    format!("exposure/{grid}/samples")
}

fn heldout_dir(grid: &str) -> String {
    format!("heldout/{grid}")
}

/// Inference only: the checkpoint is loaded and never updated.
fn exposure_stage(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.load_model()?;
    let opts = ctx.cfg.exposure.options();
    let (k_min, k_max) = pool_params(ctx);
    for (j, g) in ctx.cfg.grids_with_role(GridRole::Eval).iter().enumerate() {
        let grid = ctx.load_grid(g)?;
        let lg = build_line_graph(&grid);
        let seed = derive_seed(ctx.cfg.seed, TAG_EXPOSURE, j as u64);
        ctx.manifest.record_seed(TAG_EXPOSURE, j as u64, Some(&g.name), seed);
        let mut pool = build_holdout_pool(&grid, ctx.cfg.exposure.samples, k_min, k_max, seed)?;
        pool.role = DatasetRole::Exposure;
        let dir = exposure_samples_dir(&g.name);
        pool.save(ctx.path(&dir))?;
        ctx.record_dir(&dir)?;
        let ranking = aggregate_exposure(&model, &pool.samples, &lg, opts)?;
        ctx.write(&exposure_ranking_path(&g.name), &ranking.to_csv(&grid))?;
    }
    Ok(())
}

fn baseline_stage(ctx: &mut Ctx) -> Result<()> {
    for g in ctx.cfg.grids_with_role(GridRole::Eval) {
        let grid = ctx.load_grid(&g)?;
        let eb = electric_betweenness(&grid)?;
        ctx.write(&baseline_path(&g.name, "EB"), &eb.to_csv(&grid))?;
        let pr = bodf_pagerank(&grid, ctx.cfg.evaluation.damping)?;
        ctx.write(&baseline_path(&g.name, "PR"), &pr.to_csv(&grid))?;
    }
    Ok(())
}

/// Parses a `[method,]line_id,<score>,rank` file back into a ranking.
pub fn read_ranking(path: &Path, grid: &PowerGrid) -> Result<Ranking> {
    let file = path.display().to_string();
    let perr = |row: usize, msg: String| Error::Parse { file: file.clone(), row, msg };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| perr(0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("line_id").ok_or_else(|| perr(1, "no line_id column".into()))?;
    let rank_col = col("rank").ok_or_else(|| perr(1, "no rank column".into()))?;
    let score_col = col("exposure_score").or_else(|| col("score")).ok_or_else(|| perr(1, "no score column".into()))?;
    let mut scores = vec![f64::NAN; grid.line_count()];
    let mut ranks = vec![0usize; grid.line_count()];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| perr(row, e.to_string()))?;
        let id: u32 = rec[id_col].parse().map_err(|_| perr(row, format!("bad line_id `{}`", &rec[id_col])))?;
        let line = grid.line_index(id).ok_or_else(|| perr(row, format!("unknown line {id}")))?;
        if !scores[line].is_nan() {
            return Err(perr(row, format!("line {id} listed twice")));
        }
        scores[line] = rec[score_col].parse().map_err(|_| perr(row, format!("bad score `{}`", &rec[score_col])))?;
        ranks[line] = rec[rank_col].parse().map_err(|_| perr(row, format!("bad rank `{}`", &rec[rank_col])))?;
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(perr(0, "ranking does not cover every line".into()));
    }
    let ranking = Ranking::from_scores(scores);
    if ranking.ranks() != ranks.as_slice() {
        return Err(perr(0, "rank column disagrees with scores".into()));
    }
    Ok(ranking)
}

fn vulnerability_csv(grid: &PowerGrid, v: &VulnerabilityTable) -> String {
    let mut out = String::from("line_id,total,shallow,deep\n");
    for (i, line) in grid.lines().iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", line.id, v.total[i], v.shallow[i], v.deep[i]);
    }
    out
}

fn evaluate_stage(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.load_model()?;
    let opts = ctx.cfg.exposure.options();
    let (k_min, k_max) = pool_params(ctx);
    let ev = ctx.cfg.evaluation.clone();
    let mut rows = Vec::new();
    for (j, g) in ctx.cfg.grids_with_role(GridRole::Eval).iter().enumerate() {
        let name = g.name.as_str();
        let grid = ctx.load_grid(g)?;
        let lg = build_line_graph(&grid);
        let exposure = ctx.load_dataset(
            &exposure_samples_dir(name),
            "exposure samples not found; run the exposure stage first",
        )?;
        let mut rankings = vec![read_ranking(
            &ctx.require(&exposure_ranking_path(name), "exposure ranking not found; run the exposure stage first")?,
            &grid,
        )?];
        for m in &METHODS[1..] {
            let p = ctx.require(&baseline_path(name, m), "baseline ranking not found; run the baseline stage first")?;
            rankings.push(read_ranking(&p, &grid)?);
        }

        let seed = derive_seed(ctx.cfg.seed, TAG_HOLDOUT, j as u64);
        ctx.manifest.record_seed(TAG_HOLDOUT, j as u64, Some(name), seed);
        let heldout = build_holdout_pool(&grid, ev.holdout, k_min, k_max, seed)?;
        let exposure_seeds: BTreeSet<u64> = exposure.samples.iter().map(|s| s.seed()).collect();
        if heldout.samples.iter().any(|s| exposure_seeds.contains(&s.seed())) {
            return Err(Error::Dataset(format!("{name}: held-out and exposure cascades share a seed")));
        }
        let dir = heldout_dir(name);
        heldout.save(ctx.path(&dir))?;
        ctx.record_dir(&dir)?;

        let cutoff = depth_cutoff(&heldout.samples)?;
        let vul = ground_truth_vulnerability(&heldout.samples, cutoff)?;
        ctx.write(&format!("metrics/vulnerability_{name}.csv"), &vulnerability_csv(&grid, &vul))?;
        let gt = "ground_truth";
        rows.push(MetricRow::new(name, gt, "lines", "", grid.line_count() as f64));
        rows.push(MetricRow::new(name, gt, "avg_depth", "", vul.avg_depth));
        rows.push(MetricRow::new(name, gt, "avg_scale", "", vul.avg_scale));
        rows.push(MetricRow::new(name, gt, "depth_cutoff", "", cutoff as f64));

        let bins = [(VulBin::Total, ""), (VulBin::Shallow, "_shallow"), (VulBin::Deep, "_deep")];
        let mut sets = Vec::new();
        for (bin, suffix) in bins {
            let set = high_exposure_set(vul.values(bin)).ok();
            if let Some(s) = &set {
                rows.push(MetricRow::new(name, gt, &format!("high_exposure_size{suffix}"), "", s.members.len() as f64));
                rows.push(MetricRow::new(name, gt, &format!("high_exposure_threshold{suffix}"), "", s.threshold));
            }
            sets.push(set);
        }

        for (method, ranking) in METHODS.iter().zip(&rankings) {
            for ((bin, suffix), set) in bins.iter().zip(&sets) {
                for &tau in &ev.tau {
                    let v = mean_top_tau(ranking, vul.values(*bin), tau)?;
                    rows.push(MetricRow::new(name, method, &format!("top_tau{suffix}"), tau, v));
                }
                if let Some(set) = set.as_ref().filter(|s| !s.members.is_empty()) {
                    rows.push(MetricRow::new(name, method, &format!("mpr{suffix}"), "", mean_percentile_rank(ranking, set)?));
                }
            }
        }

        let sweep = sample_efficiency_sweep(&model, &lg, &exposure.samples, &vul.total, &ev.ns_list, opts)?;
        for p in &sweep {
            rows.push(MetricRow::new(name, "exposure", "efficiency_top10", p.sample_count, p.top10));
            rows.push(MetricRow::new(name, "exposure", "efficiency_kendall", p.sample_count, p.kendall_vs_max));
        }

        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for s in &heldout.samples {
            truth.extend(s.labels().iter().map(|&g| g as usize));
            pred.extend(model.predict(s, &lg)?);
        }
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        rows.push(MetricRow::new(name, "model", "reconstruction_macro_f1", "", macro_f1(&truth, &pred)?));
        rows.push(MetricRow::new(name, "model", "reconstruction_accuracy", "", correct as f64 / truth.len() as f64));
    }
    ctx.write(METRICS_PATH, &metrics_csv(&rows))?;
    ctx.notes.push(format!("{} metric rows", rows.len()));
    Ok(())
}

type MetricIndex = BTreeMap<(String, String, String), Vec<(String, f64)>>;

fn index_metrics(rows: &[MetricRow]) -> MetricIndex {
    let mut idx = MetricIndex::new();
    for r in rows {
        idx.entry((r.grid.clone(), r.method.clone(), r.metric.clone())).or_default().push((r.parameter.clone(), r.value));
    }
    idx
}

fn numeric_series(idx: &MetricIndex, grid: &str, method: &str, metric: &str) -> Vec<(f64, f64)> {
    idx.get(&(grid.to_string(), method.to_string(), metric.to_string()))
        .map(|v| v.iter().filter_map(|(p, y)| p.parse::<f64>().ok().map(|x| (x, *y))).collect())
        .unwrap_or_default()
}

fn scalar(idx: &MetricIndex, grid: &str, method: &str, metric: &str) -> f64 {
    idx.get(&(grid.to_string(), method.to_string(), metric.to_string()))
        .and_then(|v| v.first().map(|p| p.1))
        .unwrap_or(f64::NAN)
}

fn point_at(series: &[(f64, f64)], x: f64) -> f64 {
    series.iter().find(|p| p.0 == x).map(|p| p.1).unwrap_or(f64::NAN)
}

fn report_stage(ctx: &mut Ctx) -> Result<()> {
    let path = ctx.require(METRICS_PATH, "metrics not found; run the evaluate stage first")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let idx = index_metrics(&parse_metrics_csv(&text)?);
    let grids: Vec<String> = ctx.cfg.grids_with_role(GridRole::Eval).into_iter().map(|g| g.name).collect();
    for grid in &grids {
        let series: Vec<plot::Series> = METHODS
            .iter()
            .map(|m| plot::Series { name: m.to_string(), points: numeric_series(&idx, grid, m, "top_tau") })
            .collect();
        let svg = plot::line_chart(&format!("Mean top-tau% vulnerability, {grid}"), "tau (%)", "mean vulnerability", &series);
        ctx.write(&format!("report/top_tau_{grid}.svg"), &svg)?;

        let eff = numeric_series(&idx, grid, "exposure", "efficiency_top10");
        let mut series = vec![plot::Series { name: "exposure".into(), points: eff.clone() }];
        for m in &METHODS[1..] {
            let flat = point_at(&numeric_series(&idx, grid, m, "top_tau"), 10.0);
            series.push(plot::Series { name: m.to_string(), points: eff.iter().map(|p| (p.0, flat)).collect() });
        }
        let svg = plot::line_chart(&format!("Top-10% vulnerability vs cascade samples, {grid}"), "samples", "mean vulnerability", &series);
        ctx.write(&format!("report/efficiency_{grid}.svg"), &svg)?;

        let cats = vec!["shallow".to_string(), "deep".to_string()];
        let bars: Vec<(String, Vec<f64>)> = METHODS
            .iter()
            .map(|m| {
                let vals = ["top_tau_shallow", "top_tau_deep"]
                    .iter()
                    .map(|metric| point_at(&numeric_series(&idx, grid, m, metric), 10.0))
                    .collect();
                (m.to_string(), vals)
            })
            .collect();
        let svg = plot::bar_chart(&format!("Top-10% vulnerability by failure depth, {grid}"), "mean vulnerability", &cats, &bars);
        ctx.write(&format!("report/depth_{grid}.svg"), &svg)?;
    }
    let bars: Vec<(String, Vec<f64>)> = METHODS
        .iter()
        .map(|m| (m.to_string(), grids.iter().map(|g| scalar(&idx, g, m, "mpr")).collect()))
        .collect();
    ctx.write("report/mpr.svg", &plot::bar_chart("Mean percentile rank of high-exposure lines", "MPR", &grids, &bars))?;
    Ok(())
}
