//! GRU-gated graph attention network over line graphs.
//!
//! Each line starts from an embedding of its failure iteration. A shared
//! LayerNorm → GAT → ELU → GRU-gate step runs `G - 1` times, then a second
//! LayerNorm and an output GAT produce per-line class logits. The attention
//! coefficients of the hidden steps are kept in a [`ForwardTrace`] for
//! exposure analysis.

mod checkpoint;
mod train;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{reconstruction_predictions, train, EpochRecord, SampleGraphs, TrainHistory};

use crate::autodiff::{AdamConfig, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::cascade::CascadeSample;
use crate::error::{Error, Result};
use crate::grid::LineGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    /// Number of failure-iteration classes `C`; labels must be `< C`.
    pub classes: usize,
    pub lr: f64,
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// First warm-restart period, in epochs.
    pub scheduler_t0: usize,
    pub scheduler_t_mult: usize,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 256,
            heads: 4,
            classes: 100,
            lr: 5e-5,
            accumulation_steps: 4,
            max_epochs: 20,
            patience: 10,
            scheduler_t0: 1,
            scheduler_t_mult: 2,
            validation_fraction: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.accumulation_steps == 0 || self.scheduler_t0 == 0 || self.scheduler_t_mult == 0 {
            return Err(Error::Config("accumulation_steps and scheduler periods must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// True when both configs describe the same parameter shapes.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.hidden_dim == other.hidden_dim && self.heads == other.heads && self.classes == other.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GatHead {
    w: ParamId,
    a: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    embedding: ParamId,
    gat: Vec<GatHead>,
    wz: ParamId,
    bz: ParamId,
    wr: ParamId,
    br: ParamId,
    wh: ParamId,
    bh: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    out: Vec<GatHead>,
}

#[derive(Debug, Clone, Copy)]
struct BoundHead {
    w: Var,
    a_src: Var,
    a_dst: Var,
}

/// Parameters as recorded on one tape.
#[derive(Debug, Clone)]
struct Bound {
    gat: Vec<BoundHead>,
    wz: Var,
    bz: Var,
    wr: Var,
    br: Var,
    wh: Var,
    bh: Var,
    ln1: (Var, Var),
    ln2: (Var, Var),
    out: Vec<BoundHead>,
}

/// Model parameters. One set is shared by every recurrent step, so the
/// parameter count does not depend on cascade depth or grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct GruGatModel {
    config: ModelConfig,
    params: ParameterSet,
    ids: ParamIds,
}

/// Per-step quantities captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// `alpha[k][e]`: head-`k` coefficient on edge `e` of the line graph.
    pub alpha: Vec<Vec<f64>>,
    /// Head-averaged coefficient per edge.
    pub alpha_mean: Vec<f64>,
    /// GRU candidate state.
    pub candidate: Tensor,
    /// Hidden state after the step.
    pub hidden: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub initial_hidden: Tensor,
    /// One entry per hidden GRU-GAT step (`G - 1` of them); the output
    /// layer is not traced.
    pub steps: Vec<StepTrace>,
    pub edge_count: usize,
    pub node_count: usize,
}

/// Edge index arrays shared by every op on one line graph.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub nodes: usize,
}

impl GraphIndex {
    pub fn new(lg: &LineGraph) -> Self {
        GraphIndex { src: lg.sources().into(), dst: lg.targets().into(), nodes: lg.node_count() }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect())
}

impl GruGatModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, c, dh) = (config.hidden_dim, config.classes, config.head_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParameterSet::new();
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let emb = Tensor::new(c, d, (0..c * d).map(|_| normal.sample(&mut rng)).collect());
        let embedding = ps.register("embedding", emb);
        let gat = (0..config.heads)
            .map(|k| GatHead {
                w: ps.register(format!("gat.w.{k}"), glorot(&mut rng, dh, d)),
                a: ps.register(format!("gat.a.{k}"), glorot(&mut rng, 1, 2 * dh)),
            })
            .collect();
        let wz = ps.register("gru.wz", glorot(&mut rng, d, 2 * d));
        let bz = ps.register("gru.bz", Tensor::zeros(1, d));
        let wr = ps.register("gru.wr", glorot(&mut rng, d, 2 * d));
        let br = ps.register("gru.br", Tensor::zeros(1, d));
        let wh = ps.register("gru.wh", glorot(&mut rng, d, 2 * d));
        let bh = ps.register("gru.bh", Tensor::zeros(1, d));
        let ln1_gain = ps.register("ln1.gain", Tensor::full(1, d, 1.0));
        let ln1_bias = ps.register("ln1.bias", Tensor::zeros(1, d));
        let ln2_gain = ps.register("ln2.gain", Tensor::full(1, d, 1.0));
        let ln2_bias = ps.register("ln2.bias", Tensor::zeros(1, d));
        let out = (0..config.heads)
            .map(|k| GatHead {
                w: ps.register(format!("out.w.{k}"), glorot(&mut rng, c, d)),
                a: ps.register(format!("out.a.{k}"), glorot(&mut rng, 1, 2 * c)),
            })
            .collect();
        let ids = ParamIds {
            embedding,
            gat,
            wz,
            bz,
            wr,
            br,
            wh,
            bh,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            out,
        };
        Ok(GruGatModel { config, params: ps, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_labels(&self, sample: &CascadeSample) -> Result<Rc<[usize]>> {
        let classes = self.config.classes;
        if let Some(&label) = sample.labels().iter().find(|&&g| g as usize >= classes) {
            return Err(Error::LabelOverflow { label: label as usize, classes });
        }
        Ok(sample.labels().iter().map(|&g| g as usize).collect())
    }

    /// `h0[u] = E[g_u]`.
    pub fn embed(&self, tape: &mut Tape, sample: &CascadeSample) -> Result<Var> {
        let ids = self.check_labels(sample)?;
        let table = tape.param(&self.params, self.ids.embedding);
        tape.embedding_lookup(table, ids)
    }

    fn bind_heads(&self, tape: &mut Tape, heads: &[GatHead]) -> Result<Vec<BoundHead>> {
        heads
            .iter()
            .map(|head| {
                let w = tape.param(&self.params, head.w);
                let a = tape.param(&self.params, head.a);
                let dh = tape.value(w).rows();
                Ok(BoundHead { w, a_src: tape.slice(a, 0, dh)?, a_dst: tape.slice(a, dh, 2 * dh)? })
            })
            .collect()
    }

    /// Records every parameter on the tape once, so all recurrent steps
    /// share one node per weight.
    fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let p = &self.params;
        let ids = &self.ids;
        Ok(Bound {
            gat: self.bind_heads(tape, &ids.gat)?,
            wz: tape.param(p, ids.wz),
            bz: tape.param(p, ids.bz),
            wr: tape.param(p, ids.wr),
            br: tape.param(p, ids.br),
            wh: tape.param(p, ids.wh),
            bh: tape.param(p, ids.bh),
            ln1: (tape.param(p, ids.ln1_gain), tape.param(p, ids.ln1_bias)),
            ln2: (tape.param(p, ids.ln2_gain), tape.param(p, ids.ln2_bias)),
            out: self.bind_heads(tape, &ids.out)?,
        })
    }

    fn gat(tape: &mut Tape, x: Var, heads: &[BoundHead], g: &GraphIndex) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut outs = Vec::with_capacity(heads.len());
        let mut alphas = Vec::with_capacity(heads.len());
        for head in heads {
            let wx = tape.matmul_nt(x, head.w)?;
            let s_src = tape.matmul_nt(wx, head.a_src)?;
            let s_dst = tape.matmul_nt(wx, head.a_dst)?;
            let e_src = tape.gather_rows(s_src, g.src.clone())?;
            let e_dst = tape.gather_rows(s_dst, g.dst.clone())?;
            let e = tape.add(e_src, e_dst)?;
            let e = tape.leaky_relu(e);
            let alpha = tape.segment_softmax(e, g.dst.clone(), g.nodes)?;
            // sum_u α W h_u = W sum_u α h_u: aggregate in the narrower space.
            let widens = tape.value(head.w).rows() > tape.value(head.w).cols();
            let msg = tape.gather_rows(if widens { x } else { wx }, g.src.clone())?;
            let msg = tape.scale_rows(msg, alpha)?;
            let agg = tape.segment_sum(msg, g.dst.clone(), g.nodes)?;
            outs.push(if widens { tape.matmul_nt(agg, head.w)? } else { agg });
            alphas.push(alpha);
        }
        Ok((outs, alphas))
    }

    fn check_hidden(&self, tape: &Tape, h: Var, g: &GraphIndex) -> Result<()> {
        if tape.value(h).rows() != g.nodes || tape.value(h).cols() != self.config.hidden_dim {
            return Err(Error::Shape {
                op: "gat_layer",
                detail: format!("input {:?} for {} nodes", tape.value(h).shape(), g.nodes),
            });
        }
        Ok(())
    }

    /// Hidden multi-head attention layer: per head `k`, the score on edge
    /// `u -> v` is `leaky_relu(a_k . [W_k h_u || W_k h_v])`, normalised over
    /// the edges entering `v`; the head output at `v` is the α-weighted sum
    /// of `W_k h_u`. Heads are concatenated. Returns one `E x 1` α per head.
    pub fn gat_layer(&self, tape: &mut Tape, h: Var, g: &GraphIndex) -> Result<(Var, Vec<Var>)> {
        self.check_hidden(tape, h, g)?;
        let heads = self.bind_heads(tape, &self.ids.gat)?;
        let (outs, alphas) = Self::gat(tape, h, &heads, g)?;
        Ok((tape.concat(&outs)?, alphas))
    }

    /// `z = σ(W_z[h_prev‖h_new])`, `r = σ(W_r[h_prev‖h_new])`,
    /// `h̃ = tanh(W_h[r⊙h_prev ‖ h_new])`, `h = (1−z)⊙h_prev + z⊙h̃`.
    /// Returns `(h, h̃)`.
    pub fn gru_gate(&self, tape: &mut Tape, h_prev: Var, h_new: Var) -> Result<(Var, Var)> {
        let b = self.bind(tape)?;
        Self::gru(tape, &b, h_prev, h_new)
    }

    fn gru(tape: &mut Tape, b: &Bound, h_prev: Var, h_new: Var) -> Result<(Var, Var)> {
        let both = tape.concat(&[h_prev, h_new])?;
        let z = tape.matmul_nt(both, b.wz)?;
        let z = tape.add_row(z, b.bz)?;
        let z = tape.sigmoid(z);
        let r = tape.matmul_nt(both, b.wr)?;
        let r = tape.add_row(r, b.br)?;
        let r = tape.sigmoid(r);
        let reset = tape.mul(r, h_prev)?;
        let both = tape.concat(&[reset, h_new])?;
        let cand = tape.matmul_nt(both, b.wh)?;
        let cand = tape.add_row(cand, b.bh)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, h_prev)?;
        let step = tape.mul(z, delta)?;
        Ok((tape.add(h_prev, step)?, cand))
    }

    fn layer_norm(tape: &mut Tape, x: Var, (gain, bias): (Var, Var)) -> Result<Var> {
        let n = tape.layer_norm(x);
        let n = tape.mul_row(n, gain)?;
        tape.add_row(n, bias)
    }

    /// Records the full forward pass on `tape` and returns the `N x C`
    /// logits with the trace of the hidden steps.
    pub fn forward_on(&self, tape: &mut Tape, sample: &CascadeSample, g: &GraphIndex) -> Result<(Var, ForwardTrace)> {
        let big_g = sample.max_iteration() as usize;
        if big_g < 2 {
            return Err(Error::InvalidSample(format!(
                "forward needs G >= 2, sample has G = {big_g}"
            )));
        }
        if sample.line_count() != g.nodes {
            return Err(Error::InvalidSample(format!(
                "sample has {} lines, line graph has {} nodes",
                sample.line_count(),
                g.nodes
            )));
        }
        let mut h = self.embed(tape, sample)?;
        let b = self.bind(tape)?;
        let initial_hidden = tape.value(h).clone();
        let mut steps = Vec::with_capacity(big_g - 1);
        for _ in 0..big_g - 1 {
            let x = Self::layer_norm(tape, h, b.ln1)?;
            let (outs, alphas) = Self::gat(tape, x, &b.gat, g)?;
            let m = tape.concat(&outs)?;
            let h_new = tape.elu(m);
            let (next, cand) = Self::gru(tape, &b, h, h_new)?;
            h = next;
            let alpha: Vec<Vec<f64>> = alphas.iter().map(|&a| tape.value(a).data().to_vec()).collect();
            let heads = alpha.len() as f64;
            let alpha_mean = (0..g.src.len()).map(|e| alpha.iter().map(|a| a[e]).sum::<f64>() / heads).collect();
            steps.push(StepTrace {
                alpha,
                alpha_mean,
                candidate: tape.value(cand).clone(),
                hidden: tape.value(h).clone(),
            });
        }
        let x = Self::layer_norm(tape, h, b.ln2)?;
        let (outs, _) = Self::gat(tape, x, &b.out, g)?;
        let mut logits = outs[0];
        for &o in &outs[1..] {
            logits = tape.add(logits, o)?;
        }
        let logits = tape.scale(logits, 1.0 / outs.len() as f64);
        let trace = ForwardTrace { initial_hidden, steps, edge_count: g.src.len(), node_count: g.nodes };
        Ok((logits, trace))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, sample: &CascadeSample, lg: &LineGraph) -> Result<(Tensor, ForwardTrace)> {
        let mut tape = Tape::new();
        let g = GraphIndex::new(lg);
        let (logits, trace) = self.forward_on(&mut tape, sample, &g)?;
        Ok((tape.value(logits).clone(), trace))
    }

    /// Summed cross-entropy of the logits against the sample labels.
    pub fn loss_on(&self, tape: &mut Tape, sample: &CascadeSample, g: &GraphIndex) -> Result<Var> {
        let (logits, _) = self.forward_on(tape, sample, g)?;
        let labels = self.check_labels(sample)?;
        tape.cross_entropy_with_logits(logits, labels)
    }

    /// Argmax class per line.
    pub fn predict(&self, sample: &CascadeSample, lg: &LineGraph) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(sample, lg)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row_slice(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub(crate) fn from_parts(config: ModelConfig, params: &ParameterSet) -> Result<Self> {
        let mut model = GruGatModel::new(config)?;
        model.params.copy_values_from(params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
