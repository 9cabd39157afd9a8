use std::rc::Rc;

use super::params::{ParamId, ParameterSet};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// Keeps the per-row inverse standard deviation for the backward pass.
    LayerNorm(Var, Vec<f64>),
    Gather(Var, Rc<[usize]>),
    SegmentSoftmax(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    /// Keeps the row-wise softmax of the logits.
    CrossEntropy(Var, Rc<[usize]>, Tensor),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation in topological order and replays it in
/// reverse for gradients. Single-threaded; build one tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records the current value of a parameter; its gradient flows back
    /// into the [`ParameterSet`] on [`Tape::backward`].
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", x.shape(), y.shape())));
        }
        let out = matmul(x, y);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T`, the usual linear layer with `b` stored as `out x in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}^T", x.shape(), y.shape())));
        }
        let out = matmul_nt(x, y);
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::new(x.rows(), x.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err(op, format!("{:?} with row {:?}", x.shape(), r.shape())));
        }
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (o, &b) in out.row_slice_mut(i).iter_mut().zip(r.data()) {
                *o = f(*o, b);
            }
        }
        Ok(out)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |p, q| p + q)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |p, q| p * q)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    /// Multiplies row `i` of `a` by `s[i]`, with `s` of shape `rows x 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, w) = (self.value(a), self.value(s));
        if w.cols() != 1 || w.rows() != x.rows() {
            return Err(shape_err("scale_rows", format!("{:?} by {:?}", x.shape(), w.shape())));
        }
        let mut out = x.clone();
        for i in 0..x.rows() {
            let k = w.data()[i];
            out.row_slice_mut(i).iter_mut().for_each(|o| *o *= k);
        }
        Ok(self.push(out, Op::ScaleRows(a, s)))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let rows = self.value(first).rows();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(shape_err(
                "concat",
                format!("row mismatch {} vs {}", rows, self.value(*bad).rows()),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::new(rows, cols, data), Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(shape_err("slice", format!("columns {start}..{end} of {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        let out = Tensor::new(x.rows(), end - start, data);
        Ok(self.push(out, Op::Slice(a, start, end)))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { LEAKY_SLOPE * x });
        self.push(out, Op::LeakyRelu(a, LEAKY_SLOPE))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(out, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise normalisation to zero mean and unit variance, without gain
    /// or bias.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_slice_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    /// Row `idx[i]` of `a` becomes row `i` of the output.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {} rows", x.rows())));
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx.iter() {
            data.extend_from_slice(x.row_slice(i));
        }
        let out = Tensor::new(idx.len(), x.cols(), data);
        Ok(self.push(out, Op::Gather(a, idx)))
    }

    /// Rows of an embedding table selected by integer ids.
    pub fn embedding_lookup(&mut self, table: Var, ids: Rc<[usize]>) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<[usize]>, segment_count: usize) -> Result<Var> {
        let x = self.value(a);
        check_segments("segment_softmax", x, &segments, segment_count)?;
        let cols = x.cols();
        let mut max = vec![f64::NEG_INFINITY; segment_count * cols];
        for (r, &s) in segments.iter().enumerate() {
            for (c, &v) in x.row_slice(r).iter().enumerate() {
                let m = &mut max[s * cols + c];
                *m = m.max(v);
            }
        }
        let mut out = x.clone();
        let mut denom = vec![0.0; segment_count * cols];
        for (r, &s) in segments.iter().enumerate() {
            for (c, v) in out.row_slice_mut(r).iter_mut().enumerate() {
                *v = (*v - max[s * cols + c]).exp();
                denom[s * cols + c] += *v;
            }
        }
        for (r, &s) in segments.iter().enumerate() {
            for (c, v) in out.row_slice_mut(r).iter_mut().enumerate() {
                *v /= denom[s * cols + c];
            }
        }
        Ok(self.push(out, Op::SegmentSoftmax(a, segments)))
    }

    /// Sums the rows of `a` into `segment_count` output rows.
    pub fn segment_sum(&mut self, a: Var, segments: Rc<[usize]>, segment_count: usize) -> Result<Var> {
        let x = self.value(a);
        check_segments("segment_sum", x, &segments, segment_count)?;
        let mut out = Tensor::zeros(segment_count, x.cols());
        for (r, &s) in segments.iter().enumerate() {
            for (o, &v) in out.row_slice_mut(s).iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SegmentSum(a, segments)))
    }

    /// Softmax cross-entropy of each row against its integer label, summed
    /// over rows.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: Rc<[usize]>) -> Result<Var> {
        let x = self.value(logits);
        if labels.len() != x.rows() {
            return Err(shape_err("cross_entropy", format!("{} labels for {} rows", labels.len(), x.rows())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
            return Err(shape_err("cross_entropy", format!("label {bad} >= {} classes", x.cols())));
        }
        let mut probs = x.clone();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = probs.row_slice_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            loss += z.ln() + m - x.get(r, label);
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, labels, probs)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Gradient of the scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulates (`+=`) the gradient of `loss` into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.accumulate(*id, &g);
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, val(*b)));
                acc(*b, matmul_tn(val(*a), g));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, matmul(g, val(*b)));
                acc(*b, matmul_tn(g, val(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, elementwise(g, y, |p, q| p * q));
                acc(*b, elementwise(g, x, |p, q| p * q));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, column_sums(g));
            }
            Op::MulRow(a, r) => {
                let (x, w) = (val(*a), val(*r));
                let mut ga = g.clone();
                let mut gr = vec![0.0; w.cols()];
                for i in 0..g.rows() {
                    for (c, v) in ga.row_slice_mut(i).iter_mut().enumerate() {
                        gr[c] += *v * x.get(i, c);
                        *v *= w.data()[c];
                    }
                }
                acc(*a, ga);
                acc(*r, Tensor::row(gr));
            }
            Op::ScaleRows(a, s) => {
                let (x, w) = (val(*a), val(*s));
                let mut ga = g.clone();
                let mut gs = vec![0.0; w.rows()];
                for i in 0..g.rows() {
                    let k = w.data()[i];
                    gs[i] = g.row_slice(i).iter().zip(x.row_slice(i)).map(|(p, q)| p * q).sum();
                    ga.row_slice_mut(i).iter_mut().for_each(|v| *v *= k);
                }
                acc(*a, ga);
                acc(*s, Tensor::column(gs));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(g.rows() * w);
                    for i in 0..g.rows() {
                        gp.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                    }
                    acc(p, Tensor::new(g.rows(), w, gp));
                    offset += w;
                }
            }
            Op::Slice(a, start, end) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    ga.row_slice_mut(i)[*start..*end].copy_from_slice(g.row_slice(i));
                }
                acc(*a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                acc(*a, elementwise(g, val(*a), |p, x| if x > 0.0 { p } else { p * slope }));
            }
            Op::Elu(a) => acc(*a, elementwise(g, val(*a), |p, x| if x > 0.0 { p } else { p * x.exp() })),
            Op::Sigmoid(a) => acc(*a, elementwise(g, &node.value, |p, y| p * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, elementwise(g, &node.value, |p, y| p * (1.0 - y * y))),
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let d = y.cols() as f64;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let mean_g = gr.iter().sum::<f64>() / d;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / d;
                    for (c, o) in ga.row_slice_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                acc(*a, ga);
            }
            Op::Gather(a, idx) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &v) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = &node.value;
                let cols = y.cols();
                let n = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n * cols];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..cols {
                        dot[s * cols + c] += y.get(r, c) * g.get(r, c);
                    }
                }
                let mut ga = Tensor::zeros(y.rows(), cols);
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..cols {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot[s * cols + c]));
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentSum(a, seg) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (r, &s) in seg.iter().enumerate() {
                    ga.row_slice_mut(r).copy_from_slice(g.row_slice(s));
                }
                acc(*a, ga);
            }
            Op::CrossEntropy(a, labels, probs) => {
                let k = g.item();
                let mut ga = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let v = ga.get(r, l);
                    ga.set(r, l, v - 1.0);
                }
                ga.data_mut().iter_mut().for_each(|v| *v *= k);
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                let x = val(*a);
                acc(*a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
        }
    }
}

fn check_segments(op: &'static str, x: &Tensor, segments: &[usize], count: usize) -> Result<()> {
    if segments.len() != x.rows() {
        return Err(shape_err(op, format!("{} segment ids for {} rows", segments.len(), x.rows())));
    }
    if let Some(&bad) = segments.iter().find(|&&s| s >= count) {
        return Err(shape_err(op, format!("segment id {bad} >= {count}")));
    }
    Ok(())
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
