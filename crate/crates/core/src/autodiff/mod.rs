//! Minimal reverse-mode automatic differentiation over dense `f64`
//! matrices: just enough operations for the graph-attention model.

mod params;
mod tape;
mod tensor;

pub use params::{AdamConfig, ParamId, ParameterSet};
pub use tape::{sigmoid, Tape, Var, LAYER_NORM_EPS, LEAKY_SLOPE};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

    /// Loss = sum(weights .* f(inputs)). Compares tape gradients with
    /// central differences and returns the worst relative error.
    fn fd_check(inputs: &[Tensor], weights_seed: u64, f: &Build) -> f64 {
        let eval = |vals: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars);
            let shape = tape.value(out).shape();
            let mut r = ChaCha8Rng::seed_from_u64(weights_seed);
            let w = tape.constant(random(&mut r, shape[0], shape[1]));
            let prod = tape.mul(out, w).unwrap();
            let loss = tape.sum_all(prod);
            let grads = tape.gradients(loss).unwrap();
            (tape.value(loss).item(), grads[..vars.len()].to_vec())
        };
        let (_, grads) = eval(inputs);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let analytic = grads[k].as_ref().map_or(0.0, |g| g.data()[i]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }

    fn check_primitive(name: &str, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        for trial in 0..50 {
            let (inputs, f) = make(&mut rng);
            let err = fd_check(&inputs, trial, &*f);
            assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
        }
    }

    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
        (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
    }

    #[test]
    fn finite_differences_matmul() {
        check_primitive("matmul", |rng| {
            let (n, k, m) = dims(rng);
            (vec![random(rng, n, k), random(rng, k, m)], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()))
        });
        check_primitive("matmul_nt", |rng| {
            let (n, k, m) = dims(rng);
            (vec![random(rng, n, k), random(rng, m, k)], Box::new(|t, v| t.matmul_nt(v[0], v[1]).unwrap()))
        });
    }

    #[test]
    fn finite_differences_elementwise() {
        check_primitive("add", |rng| {
            let (n, m, _) = dims(rng);
            (vec![random(rng, n, m), random(rng, n, m)], Box::new(|t, v| t.add(v[0], v[1]).unwrap()))
        });
        check_primitive("sub-mul", |rng| {
            let (n, m, _) = dims(rng);
            let ins = vec![random(rng, n, m), random(rng, n, m), random(rng, n, m)];
            (
                ins,
                Box::new(|t, v| {
                    let d = t.sub(v[0], v[1]).unwrap();
                    t.mul(d, v[2]).unwrap()
                }),
            )
        });
        check_primitive("scale", |rng| {
            let (n, m, _) = dims(rng);
            (vec![random(rng, n, m)], Box::new(|t, v| t.scale(v[0], -0.7)))
        });
        check_primitive("row-broadcast", |rng| {
            let (n, m, _) = dims(rng);
            let ins = vec![random(rng, n, m), random(rng, 1, m), random(rng, 1, m)];
            (
                ins,
                Box::new(|t, v| {
                    let a = t.mul_row(v[0], v[1]).unwrap();
                    t.add_row(a, v[2]).unwrap()
                }),
            )
        });
        check_primitive("scale_rows", |rng| {
            let (n, m, _) = dims(rng);
            (vec![random(rng, n, m), random(rng, n, 1)], Box::new(|t, v| t.scale_rows(v[0], v[1]).unwrap()))
        });
    }

    #[test]
    fn finite_differences_structural() {
        check_primitive("concat-slice", |rng| {
            let (n, a, b) = dims(rng);
            let ins = vec![random(rng, n, a), random(rng, n, b)];
            (
                ins,
                Box::new(move |t, v| {
                    let c = t.concat(&[v[0], v[1], v[0]]).unwrap();
                    let w = t.value(c).cols();
                    t.slice(c, 1.min(w - 1), w).unwrap()
                }),
            )
        });
        check_primitive("gather", |rng| {
            let (n, m, e) = dims(rng);
            let idx: Rc<[usize]> = (0..e + 2).map(|_| rng.random_range(0..n)).collect();
            (vec![random(rng, n, m)], Box::new(move |t, v| t.embedding_lookup(v[0], idx.clone()).unwrap()))
        });
        check_primitive("segment_sum", |rng| {
            let (e, m, s) = dims(rng);
            let seg: Rc<[usize]> = (0..e).map(|_| rng.random_range(0..s)).collect();
            (vec![random(rng, e, m)], Box::new(move |t, v| t.segment_sum(v[0], seg.clone(), s).unwrap()))
        });
        check_primitive("segment_softmax", |rng| {
            let (e, m, s) = dims(rng);
            let seg: Rc<[usize]> = (0..e + 1).map(|_| rng.random_range(0..s)).collect();
            (
                vec![random(rng, e + 1, m)],
                Box::new(move |t, v| t.segment_softmax(v[0], seg.clone(), s).unwrap()),
            )
        });
    }

    #[test]
    fn finite_differences_activations() {
        // Keep inputs away from the kinks of leaky_relu and elu.
        fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
            random(rng, r, c).map(|x| if x.abs() < 0.05 { x + 0.1f64.copysign(x) } else { x })
        }
        check_primitive("leaky_relu", |rng| {
            let (n, m, _) = dims(rng);
            (vec![away_from_zero(rng, n, m)], Box::new(|t, v| t.leaky_relu(v[0])))
        });
        check_primitive("elu", |rng| {
            let (n, m, _) = dims(rng);
            (vec![away_from_zero(rng, n, m)], Box::new(|t, v| t.elu(v[0])))
        });
        check_primitive("sigmoid-tanh", |rng| {
            let (n, m, _) = dims(rng);
            (
                vec![random(rng, n, m)],
                Box::new(|t, v| {
                    let s = t.sigmoid(v[0]);
                    t.tanh(s)
                }),
            )
        });
        check_primitive("layer_norm", |rng| {
            let (n, _, _) = dims(rng);
            let m = rng.random_range(2..6);
            (vec![random(rng, n, m)], Box::new(|t, v| t.layer_norm(v[0])))
        });
        check_primitive("cross_entropy", |rng| {
            let (n, c, _) = dims(rng);
            let labels: Rc<[usize]> = (0..n).map(|_| rng.random_range(0..c)).collect();
            (
                vec![random(rng, n, c)],
                Box::new(move |t, v| t.cross_entropy_with_logits(v[0], labels.clone()).unwrap()),
            )
        });
    }

    #[test]
    fn finite_differences_composite() {
        check_primitive("composite", |rng| {
            let (n, k, m) = dims(rng);
            let seg: Rc<[usize]> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let ins = vec![random(rng, n, k), random(rng, m, k), random(rng, 1, m)];
            (
                ins,
                Box::new(move |t, v| {
                    let h = t.matmul_nt(v[0], v[1]).unwrap();
                    let h = t.add_row(h, v[2]).unwrap();
                    let h = t.layer_norm(h);
                    let s = t.sigmoid(h);
                    let a = t.segment_softmax(s, seg.clone(), 2).unwrap();
                    let p = t.mul(a, h).unwrap();
                    let q = t.tanh(p);
                    t.segment_sum(q, seg.clone(), 2).unwrap()
                }),
            )
        });
    }

    #[test]
    fn segment_softmax_equal_logits() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::column(vec![1.0, 1.0]));
        let y = t.segment_softmax(x, Rc::from([0usize, 0]), 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn segment_softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(random(&mut rng, 40, 3).map(|v| 20.0 * v));
        let seg: Rc<[usize]> = (0..40).map(|i| i % 7).collect();
        let y = t.segment_softmax(x, seg.clone(), 7).unwrap();
        for s in 0..7 {
            for c in 0..3 {
                let total: f64 = (0..40).filter(|&r| seg[r] == s).map(|r| t.value(y).get(r, c)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![3.0; 5]));
        let y = t.layer_norm(x);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, 0.0]));
        let y = t.cross_entropy_with_logits(x, Rc::from([0usize])).unwrap();
        assert!((t.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut ps = ParameterSet::new();
        let id = ps.register("x", Tensor::scalar(3.0));
        let mut t = Tape::new();
        let x = t.param(&ps, id);
        let y = t.mul(x, x).unwrap();
        t.backward(y, &mut ps).unwrap();
        assert_eq!(ps.grad(id).item(), 6.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
        assert!(err.to_string().contains("[2, 3]"));
        assert!(t.gradients(a).is_err(), "non-scalar loss must be rejected");
    }

    #[test]
    fn deterministic_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut ps = ParameterSet::new();
            let w = ps.register("w", random(&mut rng, 4, 3));
            let x = random(&mut rng, 5, 3);
            let mut t = Tape::new();
            let xv = t.constant(x);
            let wv = t.param(&ps, w);
            let h = t.matmul_nt(xv, wv).unwrap();
            let h = t.tanh(h);
            let l = t.sum_all(h);
            t.backward(l, &mut ps).unwrap();
            ps.grad(w).data().iter().map(|g| g.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
