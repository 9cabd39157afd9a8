use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named trainable tensors with accumulated gradients and Adam moments.
/// Iteration order is registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let (r, c) = (value.rows(), value.cols());
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Multiplies every accumulated gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }

    /// One bias-corrected Adam update, then clears the gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let (value, grad, m, v) = (p.value.data_mut(), p.grad.data_mut(), p.m.data_mut(), p.v.data_mut());
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                grad[i] = 0.0;
            }
        }
    }

    /// Copies values (not gradients or optimizer state) from `other`, which
    /// must have the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// `(name, value)` pairs in registration order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = ParameterSet::new();
        let id = ps.register("w", Tensor::row(vec![1.0, -2.0]));
        ps.adam_step(5e-5, &AdamConfig::default());
        assert_eq!(ps.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_sign() {
        let mut ps = ParameterSet::new();
        let id = ps.register("w", Tensor::row(vec![0.0, 0.0]));
        let lr = 5e-5;
        let mut prev = ps.value(id).clone();
        for _ in 0..2000 {
            ps.accumulate(id, &Tensor::row(vec![0.3, -7.0]));
            ps.adam_step(lr, &AdamConfig::default());
            let cur = ps.value(id).clone();
            let d0 = cur.data()[0] - prev.data()[0];
            let d1 = cur.data()[1] - prev.data()[1];
            // mhat = g and vhat = g^2 exactly, so every step is lr * g / (|g| + eps).
            assert!((d0 + lr).abs() < 1e-10, "{d0}");
            assert!((d1 - lr).abs() < 1e-10, "{d1}");
            prev = cur;
        }
        assert!(ps.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_accumulate() {
        let mut ps = ParameterSet::new();
        let id = ps.register("x", Tensor::scalar(3.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&ps, id);
            let y = tape.mul(x, x).unwrap();
            tape.backward(y, &mut ps).unwrap();
        }
        assert_eq!(ps.grad(id).item(), 12.0);
    }
}
