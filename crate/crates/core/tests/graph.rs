use magnet_core::autodiff::{check_gradients, ParamStore, RngStream, Tape, Tensor};
use magnet_core::envs::{make_env, Action, EnvConfig, Environment, StateTensor};
use magnet_core::graph::{
    assign_types, build_ggn_input, export_graph_dot, graph_heuristic_loss, graph_temporal_loss, parse_dot_edges,
    select_graph, EdgeTarget, Ggn, GgnConfig, GraphHistory, GraphMode, RelevanceGraph,
};
use proptest::prelude::*;

/// Brute-force double loop over the matrix plus one term per event.
fn oracle_loss(w: &[Vec<f64>], prev: &[Vec<f64>], events: &[(usize, usize, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 0..w.len() {
        for j in 0..w[i].len() {
            let d = w[i][j] - prev[i][j];
            total += d * d;
        }
    }
    for &(i, j, s) in events {
        let d = w[i][j] - s;
        total += d * d;
    }
    total
}

fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(m.len(), m[0].len(), m.iter().flatten().copied().collect()).unwrap()
}

fn loss_of(w: &[Vec<f64>], prev: &[Vec<f64>], events: &[(usize, usize, f64)]) -> f64 {
    let mut tape = Tape::new();
    let wv = tape.leaf(to_tensor(w));
    let targets: Vec<EdgeTarget> = events
        .iter()
        .map(|&(row, col, target)| EdgeTarget { row, col, target })
        .collect();
    let l = graph_heuristic_loss(&mut tape, wv, &to_tensor(prev), &targets).unwrap();
    tape.value(l).item()
}

#[test]
fn losses_match_brute_force_on_fifty_random_cases() {
    let mut rng = RngStream::new(42, "graph-oracle");
    for case in 0..50 {
        let rows = 1 + rng.below(4);
        let cols = rows + rng.below(6);
        let mut mat = || -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
                .collect()
        };
        let w = mat();
        let prev = mat();
        let n_events = rng.below(5);
        let events: Vec<(usize, usize, f64)> = (0..n_events)
            .map(|_| (rng.below(rows), rng.below(cols), [0.25, 0.5, 1.0][rng.below(3)]))
            .collect();
        let got = loss_of(&w, &prev, &events);
        let want = oracle_loss(&w, &prev, &events);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
        let mut tape = Tape::new();
        let wv = tape.leaf(to_tensor(&w));
        let t = graph_temporal_loss(&mut tape, wv, &to_tensor(&prev)).unwrap();
        assert!((tape.value(t).item() - oracle_loss(&w, &prev, &[])).abs() < 1e-9);
    }
}

#[test]
fn event_terms_are_additive() {
    let w = vec![vec![0.1, -0.3, 0.7], vec![0.2, 0.0, -0.5]];
    let prev = vec![vec![0.0, -0.2, 0.6], vec![0.1, 0.1, -0.4]];
    let a = (0, 2, 1.0);
    let b = (1, 0, 0.5);
    let base = loss_of(&w, &prev, &[]);
    let both = loss_of(&w, &prev, &[a, b]);
    let only_a = loss_of(&w, &prev, &[a]) - base;
    let only_b = loss_of(&w, &prev, &[b]) - base;
    assert!((both - (base + only_a + only_b)).abs() < 1e-12);
}

#[test]
fn temporal_gradient_is_twice_the_difference() {
    let mut rng = RngStream::new(3, "g");
    let prev = Tensor::matrix(3, 5, (0..15).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    let cur = Tensor::matrix(3, 5, (0..15).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let w = tape.leaf(cur.clone());
    let l = graph_temporal_loss(&mut tape, w, &prev).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(w).unwrap();
    for i in 0..15 {
        let want = 2.0 * (cur.data()[i] - prev.data()[i]);
        assert!((g.data()[i] - want).abs() <= 1e-6 * want.abs().max(1.0));
    }
    let err = check_gradients(|t, x| graph_temporal_loss(t, x, &prev), &cur, 1e-5).unwrap();
    assert!(err < 1e-6);
}

#[test]
fn repeated_event_drives_weight_to_target_monotonically() {
    let mut w = Tensor::matrix(2, 3, vec![0.0, -0.4, 0.2, 0.1, 0.0, 0.3]).unwrap();
    let e = [EdgeTarget {
        row: 0,
        col: 1,
        target: 1.0,
    }];
    let mut gap = (w.data()[1] - 1.0).abs();
    for _ in 0..50 {
        let prev = w.clone();
        let mut tape = Tape::new();
        let v = tape.leaf(w.clone());
        let l = graph_heuristic_loss(&mut tape, v, &prev, &e).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap().clone();
        for (x, d) in w.data_mut().iter_mut().zip(g.data()) {
            *x -= 0.1 * d;
        }
        let now = (w.data()[1] - 1.0).abs();
        assert!(now < gap);
        gap = now;
    }
    assert!(gap < 1e-3);
}

fn pp_env(seed: u64) -> Box<dyn Environment> {
    let cfg = EnvConfig {
        obstacles: 4,
        ..EnvConfig::predator_prey(10)
    };
    let mut env = make_env(&cfg).unwrap();
    env.reset(seed).unwrap();
    env
}

#[test]
fn history_boundary_rules() {
    let env = pp_env(1);
    let (rows, cols) = (env.num_rows(), env.num_columns());
    let aw = rows * 2;
    let mut h = GraphHistory::new(rows, cols, aw, RngStream::new(9, "graph-init"));
    assert!(build_ggn_input(&mut h).is_err());
    let s0 = env.grid().clone();
    h.push_state(s0.clone());
    let i0 = build_ggn_input(&mut h).unwrap();
    assert!(i0.states.iter().all(|s| *s == s0));
    assert!(i0.actions.iter().all(|a| a.iter().all(|x| *x == 0.0)));
    assert!(i0.prev_graph.data().iter().all(|x| (-0.1..=0.1).contains(x)));
    let again = build_ggn_input(&mut GraphHistory::new(rows, cols, aw, RngStream::new(9, "graph-init")).tap(&s0)).unwrap();
    assert_eq!(again.prev_graph, i0.prev_graph, "start graph is seeded");

    let mut s1 = StateTensor::new(10, env.config().channels);
    s1.set((1, 1), 6);
    let a0 = vec![0.5; aw];
    h.push_action(a0.clone()).unwrap();
    h.push_state(s1.clone());
    let i1 = build_ggn_input(&mut h).unwrap();
    assert_eq!(i1.states, [s1.clone(), s0.clone(), s0.clone()]);
    assert_eq!(i1.actions, [a0.clone(), vec![0.0; aw]]);

    let mut s2 = StateTensor::new(10, env.config().channels);
    s2.set((2, 2), 6);
    let a1 = vec![-0.5; aw];
    h.push_action(a1.clone()).unwrap();
    h.push_state(s2.clone());
    let mut s3 = StateTensor::new(10, env.config().channels);
    s3.set((3, 3), 6);
    h.push_action(vec![0.25; aw]).unwrap();
    h.push_state(s3.clone());
    let i3 = build_ggn_input(&mut h).unwrap();
    assert_eq!(i3.states, [s3, s2, s1]);
    assert_eq!(i3.actions, [vec![0.25; aw], a1]);
}

trait Tap {
    fn tap(self, s: &StateTensor) -> Self;
}

impl Tap for GraphHistory {
    fn tap(mut self, s: &StateTensor) -> Self {
        self.push_state(s.clone());
        self
    }
}

fn small_ggn(core: &str, env: &dyn Environment, store: &mut ParamStore, seed: u64) -> Ggn {
    let cfg = GgnConfig {
        core: core.into(),
        kernel: 3,
        filters: 2,
        token_width: 8,
        mlp_sizes: vec![16, 8],
        heads: 2,
        attention_ff: 8,
        head_hidden: 8,
        dropout: 0.2,
    };
    let c = env.config();
    Ggn::new(
        store,
        "ggn",
        &cfg,
        c.size,
        c.channels,
        env.num_rows(),
        env.num_columns(),
        env.num_rows() * 2,
        &mut RngStream::new(seed, "ggn-init"),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ggn_masks_absent_columns_and_stays_in_range(seed in 0u64..1000, attention: bool, jitter in 0.0f64..2.0) {
        let env = pp_env(seed);
        let table = assign_types(env.as_ref()).unwrap();
        let mut store = ParamStore::new();
        let core = if attention { "self-attention" } else { "mlp" };
        let ggn = small_ggn(core, env.as_ref(), &mut store, seed);
        let mut rng = RngStream::new(seed, "jitter");
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).value.data_mut() {
                *v += rng.uniform_range(-jitter, jitter);
            }
        }
        let mut h = GraphHistory::new(env.num_rows(), env.num_columns(), env.num_rows() * 2, RngStream::new(seed, "h"));
        h.push_state(env.grid().clone());
        let input = build_ggn_input(&mut h).unwrap();
        let mask = table.mask();
        let run = |train: bool| {
            let mut tape = Tape::new();
            let w = ggn.forward(&mut tape, &store, &input, &mask, &mut RngStream::new(seed, "drop"), train).unwrap();
            tape.value(w).clone()
        };
        let w = run(false);
        prop_assert_eq!(&w, &run(false));
        for (i, (x, m)) in w.data().iter().zip(&mask).enumerate() {
            prop_assert!((-1.0..=1.0).contains(x));
            if *m == 0.0 {
                prop_assert_eq!(*x, 0.0, "entry {} is masked", i);
            }
        }
        let c = table.cols();
        for r in 0..table.rows {
            prop_assert_eq!(w.data()[r * c + r], 0.0);
        }
        for col in 0..c {
            if !table.is_present(col) {
                for r in 0..table.rows {
                    prop_assert_eq!(w.data()[r * c + col], 0.0);
                }
            }
        }
    }

    #[test]
    fn every_vertex_gets_one_type(seed in 0u64..1000, bomber: bool, steps in 0usize..40) {
        let cfg = if bomber { EnvConfig::bomber(9) } else { EnvConfig::predator_prey(10) };
        let mut env = make_env(&cfg).unwrap();
        env.reset(seed).unwrap();
        let mut rng = RngStream::new(seed, "s");
        for _ in 0..steps {
            if env.is_done() { break; }
            let a = env.scripted_joint_action(&mut rng);
            env.step(&a).unwrap();
        }
        let table = assign_types(env.as_ref()).unwrap();
        let vertices = env.vertices();
        prop_assert_eq!(table.num_present(), vertices.len());
        let ntypes = table.schema.num_vertex_types();
        for v in table.present() {
            prop_assert!(v.vertex_type < ntypes);
            prop_assert_eq!(vertices.iter().filter(|u| u.id == v.id).count(), 1);
        }
        for a in 0..ntypes {
            for b in 0..ntypes {
                prop_assert_eq!(table.schema.edge_type(a, b), table.schema.edge_type(b, a));
                prop_assert!(table.schema.edge_type(a, b) < table.schema.num_edge_types());
            }
        }
    }

    #[test]
    fn dot_round_trip_recovers_nonzero_edges(seed in 0u64..1000, zero_frac in 0.0f64..1.0) {
        let env = pp_env(seed);
        let table = assign_types(env.as_ref()).unwrap();
        let mask = table.mask();
        let mut rng = RngStream::new(seed, "w");
        let data: Vec<f64> = mask
            .iter()
            .map(|m| if *m == 0.0 || rng.uniform() < zero_frac { 0.0 } else { rng.uniform_range(-1.0, 1.0) })
            .collect();
        let g = RelevanceGraph {
            weights: Tensor::matrix(table.rows, table.cols(), data).unwrap(),
            table,
            tick: 3,
        };
        let parsed = parse_dot_edges(&export_graph_dot(&g)).unwrap();
        let want = g.edges();
        prop_assert_eq!(parsed.len(), want.len());
        for ((r, c, w), (pr, pc, pw)) in want.iter().zip(&parsed) {
            prop_assert_eq!((r, c), (pr, pc));
            prop_assert!((w - pw).abs() <= 5e-5);
        }
    }
}

#[test]
fn shared_and_individual_selection() {
    let env = pp_env(2);
    let table = assign_types(env.as_ref()).unwrap();
    let mk = |v: f64| RelevanceGraph {
        weights: Tensor::filled(&[table.rows, table.cols()], v),
        table: table.clone(),
        tick: 0,
    };
    let shared = select_graph(&[mk(0.1)], GraphMode::Shared, 3).unwrap();
    assert_eq!(shared.len(), 3);
    assert!(shared.iter().all(|g| *g == shared[0]));
    let own = select_graph(&[mk(0.1), mk(0.2), mk(0.3)], GraphMode::Individual, 3).unwrap();
    assert_ne!(own[0], own[2]);
    assert!(select_graph(&[mk(0.1)], GraphMode::Individual, 3).is_err());
}

#[test]
fn dot_single_edge_and_empty_graph() {
    let env = pp_env(4);
    let table = assign_types(env.as_ref()).unwrap();
    let mut w = Tensor::zeros(&[table.rows, table.cols()]);
    let g0 = RelevanceGraph {
        weights: w.clone(),
        table: table.clone(),
        tick: 0,
    };
    assert!(!export_graph_dot(&g0).contains("->"));
    w.data_mut()[1] = 0.5;
    let g1 = RelevanceGraph { weights: w, table, tick: 0 };
    let dot = export_graph_dot(&g1);
    let lines: Vec<&str> = dot.lines().filter(|l| l.contains("->")).collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].contains("weight=\"0.5000\""));
    let _ = Action::noop(env.action_space());
}
