use super::*;
use crate::grid::fixtures::{chain, triangle};
use crate::grid::{build_line_graph, LineGraph};

fn tiny() -> ModelConfig {
    ModelConfig { hidden_dim: 8, heads: 2, classes: 5, lr: 1e-2, seed: 11, ..ModelConfig::default() }
}

fn sample(labels: Vec<u32>) -> CascadeSample {
    CascadeSample::new("g", 0, labels).unwrap()
}

#[test]
fn published_defaults() {
    let c = ModelConfig::default();
    assert_eq!((c.hidden_dim, c.heads, c.classes), (256, 4, 100));
    assert_eq!(c.lr, 5e-5);
    assert_eq!(c.accumulation_steps, 4);
    assert_eq!((c.max_epochs, c.patience), (20, 10));
    assert_eq!((c.scheduler_t0, c.scheduler_t_mult), (1, 2));
}

#[test]
fn attention_sums_to_one_per_target() {
    let m = GruGatModel::new(tiny()).unwrap();
    let lg = build_line_graph(&chain(7));
    let s = sample(vec![1, 2, 3, 2, 0, 1]);
    let (logits, trace) = m.forward(&s, &lg).unwrap();
    assert_eq!(logits.shape(), [6, 5]);
    assert_eq!(trace.steps.len(), 2);
    for step in &trace.steps {
        for alpha in step.alpha.iter().chain(std::iter::once(&step.alpha_mean)) {
            let mut sums = vec![0.0; lg.node_count()];
            for (e, edge) in lg.edges().iter().enumerate() {
                assert!(alpha[e] >= 0.0);
                sums[edge.target] += alpha[e];
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-12, "{s}");
            }
        }
    }
}

#[test]
fn isolated_line_attends_to_itself() {
    let m = GruGatModel::new(tiny()).unwrap();
    let lg = LineGraph::from_adjacency(2, &[]).unwrap();
    let (_, trace) = m.forward(&sample(vec![1, 2]), &lg).unwrap();
    assert_eq!(trace.steps[0].alpha_mean, vec![1.0, 1.0]);
}

#[test]
fn gru_state_interpolates() {
    let m = GruGatModel::new(tiny()).unwrap();
    let lg = build_line_graph(&chain(6));
    let (_, trace) = m.forward(&sample(vec![1, 2, 3, 4, 0]), &lg).unwrap();
    let mut prev = &trace.initial_hidden;
    for step in &trace.steps {
        for ((&h, &p), &c) in step.hidden.data().iter().zip(prev.data()).zip(step.candidate.data()) {
            assert!(h >= p.min(c) - 1e-12 && h <= p.max(c) + 1e-12);
            assert!(c.abs() <= 1.0);
        }
        prev = &step.hidden;
    }
}

#[test]
fn parameter_count_is_independent_of_graph_and_depth() {
    let m = GruGatModel::new(tiny()).unwrap();
    let (d, c, h) = (8, 5, 2);
    let dh = d / h;
    let expected = c * d + h * (dh * d + 2 * dh) + 3 * (d * 2 * d + d) + 4 * d + h * (c * d + 2 * c);
    assert_eq!(m.parameter_count(), expected);
    let small = build_line_graph(&chain(4));
    let big = build_line_graph(&chain(10));
    m.forward(&sample(vec![1, 2, 0]), &small).unwrap();
    m.forward(&sample(vec![1, 2, 3, 4, 0, 0, 0, 0, 1]), &big).unwrap();
    assert_eq!(m.parameter_count(), expected);
}

#[test]
fn rejects_bad_samples() {
    let m = GruGatModel::new(tiny()).unwrap();
    let lg = build_line_graph(&chain(4));
    assert!(matches!(m.forward(&sample(vec![1, 0, 0]), &lg), Err(Error::InvalidSample(_))));
    let deep = sample(vec![1, 2, 3, 4, 5, 0]);
    let lg6 = build_line_graph(&chain(7));
    assert!(matches!(
        m.forward(&deep, &lg6),
        Err(Error::LabelOverflow { label: 5, classes: 5 })
    ));
    assert!(matches!(m.forward(&sample(vec![1, 2]), &lg), Err(Error::InvalidSample(_))));
}

#[test]
fn relabelling_lines_permutes_outputs() {
    let m = GruGatModel::new(tiny()).unwrap();
    let grid = triangle([1.0, 0.5, -1.5], 2.0, 1.0);
    let lg = build_line_graph(&grid);
    let labels = vec![1, 2, 0];
    let (logits, trace) = m.forward(&sample(labels.clone()), &lg).unwrap();
    // Line u becomes perm[u].
    let perm = [2usize, 0, 1];
    let pairs: Vec<(usize, usize, Option<u32>)> = lg
        .edges()
        .iter()
        .filter(|e| !e.is_self_loop())
        .map(|e| (perm[e.source], perm[e.target], e.shared_bus))
        .collect();
    let plg = LineGraph::from_adjacency(3, &pairs).unwrap();
    let mut plabels = vec![0; 3];
    for (u, &g) in labels.iter().enumerate() {
        plabels[perm[u]] = g;
    }
    let (plogits, ptrace) = m.forward(&sample(plabels), &plg).unwrap();
    for u in 0..3 {
        for c in 0..5 {
            assert!((logits.get(u, c) - plogits.get(perm[u], c)).abs() < 1e-10);
        }
    }
    for (e, edge) in lg.edges().iter().enumerate() {
        let pe = plg
            .edges()
            .iter()
            .position(|x| x.source == perm[edge.source] && x.target == perm[edge.target])
            .unwrap();
        assert!((trace.steps[0].alpha_mean[e] - ptrace.steps[0].alpha_mean[pe]).abs() < 1e-10);
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    let mut m = GruGatModel::new(ModelConfig { hidden_dim: 4, heads: 2, classes: 4, ..tiny() }).unwrap();
    let lg = build_line_graph(&chain(5));
    let g = GraphIndex::new(&lg);
    let s = sample(vec![1, 2, 3, 0]);
    let loss_of = |m: &GruGatModel| {
        let mut tape = Tape::new();
        let l = m.loss_on(&mut tape, &s, &g).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let loss = m.loss_on(&mut tape, &s, &g).unwrap();
    m.params_mut().zero_grad();
    tape.backward(loss, m.params_mut()).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = m.params().grad(id).clone();
        for i in (0..analytic.len()).step_by(3) {
            let orig = m.params().value(id).data()[i];
            m.params_mut().value_mut(id).data_mut()[i] = orig + h;
            let up = loss_of(&m);
            m.params_mut().value_mut(id).data_mut()[i] = orig - h;
            let down = loss_of(&m);
            m.params_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let cfg = ModelConfig { max_epochs: 6, patience: 6, accumulation_steps: 2, ..tiny() };
    let lg = build_line_graph(&chain(6));
    let graphs: SampleGraphs = [("g".to_string(), lg)].into();
    let samples: Vec<CascadeSample> = [
        vec![1, 2, 3, 0, 0],
        vec![0, 1, 2, 3, 0],
        vec![0, 0, 1, 2, 3],
        vec![3, 2, 1, 0, 0],
        vec![0, 3, 2, 1, 0],
        vec![1, 2, 0, 0, 0],
    ]
    .into_iter()
    .map(sample)
    .cycle()
    .take(20)
    .collect();
    let mut a = GruGatModel::new(cfg.clone()).unwrap();
    let hist = train(&mut a, &samples, &graphs).unwrap();
    let first = hist.epochs[0].train_loss;
    let last = hist.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    let mut b = GruGatModel::new(cfg).unwrap();
    let hist_b = train(&mut b, &samples, &graphs).unwrap();
    assert_eq!(hist, hist_b);
    assert_eq!(a.params(), b.params());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = GruGatModel::new(tiny()).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let lg = build_line_graph(&chain(5));
    let s = sample(vec![1, 2, 3, 0]);
    assert_eq!(m.forward(&s, &lg).unwrap().0, back.forward(&s, &lg).unwrap().0);
    assert_eq!(back.config(), m.config());
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = GruGatModel::new(tiny()).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint(_))));

    let mut v2 = bytes.clone();
    v2[8] = 2;
    let vpath = dir.path().join("v2.ckpt");
    std::fs::write(&vpath, &v2).unwrap();
    match load_checkpoint(&vpath) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("version 2"), "{msg}"),
        other => panic!("{other:?}"),
    }

    let other = ModelConfig { hidden_dim: 16, ..tiny() };
    match load_checkpoint_expecting(&path, &other) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("config mismatch"), "{msg}"),
        other => panic!("{other:?}"),
    }

    assert!(matches!(
        load_checkpoint(dir.path().join("absent.ckpt")),
        Err(Error::MissingArtifact { .. })
    ));
}

fn set_param(m: &mut GruGatModel, name: &str, f: impl Fn(usize) -> f64) {
    let id = m.params().id(name).unwrap();
    for (i, v) in m.params_mut().value_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn hidden(rows: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::new(rows, d, (0..rows * d).map(|i| f(i / d, i % d)).collect())
}

#[test]
fn zero_gru_weights_halve_the_state() {
    let mut m = GruGatModel::new(tiny()).unwrap();
    for name in ["gru.wz", "gru.bz", "gru.wr", "gru.br", "gru.wh", "gru.bh"] {
        set_param(&mut m, name, |_| 0.0);
    }
    let mut tape = Tape::new();
    let prev = hidden(3, 8, |r, c| (r as f64 - 1.0) * 0.3 + c as f64 * 0.1);
    let new = hidden(3, 8, |r, c| (r * c) as f64 * 0.05);
    let p = tape.constant(prev.clone());
    let n = tape.constant(new);
    let (h, cand) = m.gru_gate(&mut tape, p, n).unwrap();
    assert!(tape.value(cand).data().iter().all(|&v| v == 0.0));
    for (got, want) in tape.value(h).data().iter().zip(prev.data()) {
        assert!((got - 0.5 * want).abs() < 1e-15);
    }
}

#[test]
fn closed_update_gate_keeps_the_state() {
    let mut m = GruGatModel::new(tiny()).unwrap();
    set_param(&mut m, "gru.wz", |_| 0.0);
    set_param(&mut m, "gru.bz", |_| -60.0);
    let mut tape = Tape::new();
    let prev = hidden(4, 8, |r, c| ((r + 2 * c) as f64).sin());
    let p = tape.constant(prev.clone());
    let n = tape.constant(hidden(4, 8, |r, c| ((3 * r + c) as f64).cos()));
    let (h, _) = m.gru_gate(&mut tape, p, n).unwrap();
    for (got, want) in tape.value(h).data().iter().zip(prev.data()) {
        assert!((got - want).abs() < 1e-20);
    }
}

#[test]
fn identical_features_share_attention_evenly() {
    let m = GruGatModel::new(tiny()).unwrap();
    let lg = build_line_graph(&chain(7));
    let g = GraphIndex::new(&lg);
    let mut tape = Tape::new();
    let h = tape.constant(hidden(lg.node_count(), 8, |_, c| c as f64 * 0.2 - 0.5));
    let (_, alphas) = m.gat_layer(&mut tape, h, &g).unwrap();
    let mut indegree = vec![0usize; lg.node_count()];
    for e in lg.edges() {
        indegree[e.target] += 1;
    }
    for a in alphas {
        for (e, edge) in lg.edges().iter().enumerate() {
            assert!((tape.value(a).data()[e] - 1.0 / indegree[edge.target] as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn isolated_node_outputs_its_projection() {
    let m = GruGatModel::new(tiny()).unwrap();
    let lg = LineGraph::from_adjacency(1, &[]).unwrap();
    let g = GraphIndex::new(&lg);
    let x = hidden(1, 8, |_, c| c as f64 - 3.0);
    let mut tape = Tape::new();
    let h = tape.constant(x.clone());
    let (out, _) = m.gat_layer(&mut tape, h, &g).unwrap();
    let dh = 4;
    for k in 0..2 {
        let w = m.params().value(m.params().id(&format!("gat.w.{k}")).unwrap());
        for r in 0..dh {
            let want: f64 = (0..8).map(|c| w.get(r, c) * x.data()[c]).sum();
            assert!((tape.value(out).get(0, k * dh + r) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn step_count_follows_depth() {
    let m = GruGatModel::new(tiny()).unwrap();
    let lg = build_line_graph(&chain(5));
    let (_, t2) = m.forward(&sample(vec![1, 2, 0, 0]), &lg).unwrap();
    assert_eq!(t2.steps.len(), 1);
    let (_, t4) = m.forward(&sample(vec![1, 2, 3, 4]), &lg).unwrap();
    assert_eq!(t4.steps.len(), 3);
}

mod inductive {
    use super::*;
    use crate::grid::{generate_synthetic_grid, GridFamily, SyntheticSpec};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn one_model_fits_every_grid_size(n in 6usize..40, hub in any::<bool>(), seed in 0u64..1000, depth in 2u32..5) {
            let m = GruGatModel::new(tiny()).unwrap();
            let family = if hub { GridFamily::HubSpoke } else { GridFamily::RingMesh };
            let grid = generate_synthetic_grid(&SyntheticSpec { n_buses: n, family, capacity_factor: 1.5, seed }).unwrap();
            let lg = build_line_graph(&grid);
            let l = lg.node_count();
            let labels: Vec<u32> = (0..l).map(|i| if i < depth as usize { i as u32 + 1 } else { 0 }).collect();
            let (logits, trace) = m.forward(&sample(labels), &lg).unwrap();
            prop_assert_eq!(logits.shape(), [l, 5]);
            prop_assert_eq!(trace.steps.len(), depth as usize - 1);
            prop_assert!(logits.data().iter().all(|v| v.is_finite()));
        }
    }
}
