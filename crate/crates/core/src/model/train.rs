use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{GraphIndex, GruGatModel};
use crate::autodiff::Tape;
use crate::cascade::CascadeSample;
use crate::error::{Error, Result};
use crate::grid::LineGraph;
use crate::seeds::{derive_seed, rng};

/// Line graphs keyed by grid name.
pub type SampleGraphs = BTreeMap<String, LineGraph>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-line cross-entropy over the training split.
    pub train_loss: f64,
    /// Mean per-line cross-entropy over the validation split.
    pub val_loss: f64,
    pub lr_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub train_count: usize,
    pub val_count: usize,
}

fn graph_for<'a>(graphs: &'a BTreeMap<String, GraphIndex>, s: &CascadeSample) -> Result<&'a GraphIndex> {
    graphs
        .get(s.grid_name())
        .ok_or_else(|| Error::Dataset(format!("no line graph for grid {}", s.grid_name())))
}

/// Splits sample indices per grid so every grid contributes to both sides.
fn stratified_split(samples: &[CascadeSample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.grid_name()).or_default().push(i);
    }
    let mut r = rng(derive_seed(seed, "split", 0));
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in groups {
        idx.shuffle(&mut r);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    (train, val)
}

/// Cosine annealing with warm restarts at fractional epoch `e`.
pub(crate) fn warm_restart_lr(base: f64, t0: usize, t_mult: usize, e: f64) -> f64 {
    let (mut start, mut period) = (0.0, t0 as f64);
    while e >= start + period {
        start += period;
        period *= t_mult as f64;
    }
    0.5 * base * (1.0 + (PI * (e - start) / period).cos())
}

fn mean_loss(model: &GruGatModel, samples: &[CascadeSample], idx: &[usize], graphs: &BTreeMap<String, GraphIndex>) -> Result<f64> {
    let (mut total, mut lines) = (0.0, 0usize);
    for &i in idx {
        let s = &samples[i];
        let g = graph_for(graphs, s)?;
        let mut tape = Tape::new();
        let loss = model.loss_on(&mut tape, s, g)?;
        total += tape.value(loss).item();
        lines += s.line_count();
    }
    Ok(if lines == 0 { f64::NAN } else { total / lines as f64 })
}

/// Trains in place with Adam, gradient accumulation, warm-restart cosine
/// annealing and early stopping on validation loss. The weights of the best
/// validation epoch are restored before returning.
pub fn train(model: &mut GruGatModel, samples: &[CascadeSample], graphs: &SampleGraphs) -> Result<TrainHistory> {
    let cfg = model.config().clone();
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let index: BTreeMap<String, GraphIndex> = graphs.iter().map(|(k, lg)| (k.clone(), GraphIndex::new(lg))).collect();
    for s in samples {
        graph_for(&index, s)?;
    }
    let (mut train_idx, val_idx) = stratified_split(samples, cfg.validation_fraction, cfg.seed);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.accumulation_steps);
    let mut shuffle_rng = rng(derive_seed(cfg.seed, "shuffle", 0));

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        train_count: train_idx.len(),
        val_count: val_idx.len(),
    };
    let mut best = model.params().clone();
    let mut stale = 0;
    model.params_mut().zero_grad();

    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let (mut epoch_loss, mut epoch_lines) = (0.0, 0usize);
        let mut lr = cfg.lr;
        for (chunk_no, chunk) in train_idx.chunks(cfg.accumulation_steps).enumerate() {
            for &i in chunk {
                let s = &samples[i];
                let g = graph_for(&index, s)?;
                let mut tape = Tape::new();
                let loss = model.loss_on(&mut tape, s, g)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Convergence(format!("non-finite loss at epoch {epoch}")));
                }
                epoch_loss += value;
                epoch_lines += s.line_count();
                let scaled = tape.scale(loss, 1.0 / (s.line_count() * chunk.len()) as f64);
                tape.backward(scaled, model.params_mut())?;
            }
            let e = epoch as f64 + chunk_no as f64 / steps_per_epoch as f64;
            lr = warm_restart_lr(cfg.lr, cfg.scheduler_t0, cfg.scheduler_t_mult, e);
            model.params_mut().adam_step(lr, &cfg.adam);
        }
        let train_loss = epoch_loss / epoch_lines as f64;
        let val_loss = if val_idx.is_empty() { train_loss } else { mean_loss(model, samples, &val_idx, &index)? };
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, lr_end: lr });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = model.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params_mut().copy_values_from(&best)?;
    Ok(history)
}

/// Argmax predictions for each sample, in order.
pub fn reconstruction_predictions(model: &GruGatModel, samples: &[CascadeSample], graphs: &SampleGraphs) -> Result<Vec<Vec<usize>>> {
    samples
        .iter()
        .map(|s| {
            let lg = graphs
                .get(s.grid_name())
                .ok_or_else(|| Error::Dataset(format!("no line graph for grid {}", s.grid_name())))?;
            model.predict(s, lg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_restarts() {
        let base = 1.0;
        assert_eq!(warm_restart_lr(base, 1, 2, 0.0), 1.0);
        assert!((warm_restart_lr(base, 1, 2, 0.5) - 0.5).abs() < 1e-12);
        // Restart at epoch 1, then a period of 2.
        assert_eq!(warm_restart_lr(base, 1, 2, 1.0), 1.0);
        assert!((warm_restart_lr(base, 1, 2, 2.0) - 0.5).abs() < 1e-12);
        assert_eq!(warm_restart_lr(base, 1, 2, 3.0), 1.0);
    }

    #[test]
    fn split_keeps_every_grid_in_training() {
        let samples: Vec<CascadeSample> = (0..25)
            .map(|i| CascadeSample::new(format!("g{}", i % 3), i, vec![1, 2]).unwrap())
            .collect();
        let (train, val) = stratified_split(&samples, 0.1, 3);
        assert_eq!(train.len() + val.len(), 25);
        for g in ["g0", "g1", "g2"] {
            assert!(train.iter().any(|&i| samples[i].grid_name() == g));
        }
        let again = stratified_split(&samples, 0.1, 3);
        assert_eq!((train, val), again);
    }
}
