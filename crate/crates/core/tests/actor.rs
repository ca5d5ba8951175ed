use magnet_core::actor::{
    decision_registry, edge_messages, message_round_calls, ActorConfig, ActorShape, DecisionInput, DecisionModule,
    MessagePassing,
};
use magnet_core::autodiff::{ParamStore, RngStream, Tape, Tensor};
use magnet_core::envs::{ActionSpace, VertexId};
use magnet_core::graph::{TypeSchema, TypedVertex, VertexTable};
use proptest::prelude::*;

const OBS: usize = 6;
const FEAT: usize = 4;

fn cfg(decision: &str, iterations: usize) -> ActorConfig {
    ActorConfig {
        decision: decision.into(),
        hidden: 5,
        mp_iterations: iterations,
        init_hidden: vec![6],
        message_hidden: vec![5],
        choice_hidden: vec![6],
        fallback_hidden: vec![8, 4],
    }
}

/// `rows` learning agents followed by `extra` vertices, each given by
/// (id, vertex type).
fn table(schema: TypeSchema, rows: usize, extra: &[(VertexId, usize)]) -> VertexTable {
    let mut columns: Vec<Option<TypedVertex>> = (0..rows)
        .map(|r| {
            Some(TypedVertex {
                id: VertexId::Agent(r),
                column: r,
                vertex_type: 0,
                pos: (r, 0),
                scalar: 0.0,
            })
        })
        .collect();
    for (k, (id, t)) in extra.iter().enumerate() {
        let c = rows + k;
        columns.push(Some(TypedVertex {
            id: *id,
            column: c,
            vertex_type: *t,
            pos: (c, 1),
            scalar: 0.0,
        }));
    }
    VertexTable { schema, rows, columns }
}

fn random_input(t: VertexTable, rng: &mut RngStream) -> DecisionInput {
    let mut vec = |n: usize| (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<_>>();
    let observations = (0..t.cols()).map(|_| Some(vec(OBS))).collect();
    let features = (0..t.rows).map(|_| Some(vec(FEAT))).collect();
    DecisionInput {
        table: t,
        observations,
        features,
    }
}

fn shape(t: &VertexTable, space: ActionSpace) -> ActorShape {
    ActorShape {
        schema: t.schema,
        rows: t.rows,
        cols: t.cols(),
        obs_width: OBS,
        feature_width: FEAT,
        action_space: space,
    }
}

fn build(decision: &str, iterations: usize, s: ActorShape, seed: u64) -> (ParamStore, Box<dyn DecisionModule>) {
    let mut store = ParamStore::new();
    let ctor = decision_registry().get(decision).unwrap();
    let m = ctor(&mut store, "actor", &cfg(decision, iterations), s, &mut RngStream::new(seed, "actor-init")).unwrap();
    (store, m)
}

fn random_graph(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let mut g = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    for r in 0..rows {
        g.data_mut()[r * cols + r] = 0.0;
    }
    g
}

fn heads(m: &dyn DecisionModule, store: &ParamStore, input: &DecisionInput, graph: &Tensor) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let g = tape.constant(graph.clone());
    let out = m.forward(&mut tape, store, input, g).unwrap();
    out.heads
        .into_iter()
        .map(|h| tape.value(h.expect("agent present")).data().to_vec())
        .collect()
}

fn prey(n: usize) -> Vec<(VertexId, usize)> {
    (0..n).map(|i| (VertexId::Prey(i), 2)).collect()
}

#[test]
fn parameters_are_shared_across_vertex_counts() {
    let small = table(TypeSchema::PredatorPrey, 2, &prey(1));
    let large = table(TypeSchema::PredatorPrey, 5, &prey(7));
    let (a, _) = build("message-passing", 3, shape(&small, ActionSpace::Continuous), 1);
    let (b, _) = build("message-passing", 3, shape(&large, ActionSpace::Continuous), 1);
    assert_eq!(a.len(), b.len());
    assert_eq!(a.num_scalars(), b.num_scalars());
    assert_eq!(a.digest(), b.digest(), "same seed, same shared parameters");
}

#[test]
fn messages_scale_linearly_with_the_edge_weight() {
    let t = table(TypeSchema::PredatorPrey, 2, &prey(2));
    let mut rng = RngStream::new(5, "lin");
    let input = random_input(t.clone(), &mut rng);
    let mut store = ParamStore::new();
    let mp = MessagePassing::new(
        &mut store,
        "actor",
        &cfg("message-passing", 2),
        shape(&t, ActionSpace::Continuous),
        &mut RngStream::new(5, "init"),
    )
    .unwrap();
    let g = random_graph(2, 4, &mut rng);
    let messages = |scale: f64| {
        let mut tape = Tape::new();
        let mut gs = g.clone();
        gs.data_mut().iter_mut().for_each(|x| *x *= scale);
        let gv = tape.constant(gs);
        let prep = mp.prepare(&mut tape, &input, gv).unwrap();
        let mu = mp.init_info(&mut tape, &store, &input, &prep).unwrap();
        edge_messages(&mp, &mut tape, &store, &prep, gv, mu)
            .unwrap()
            .into_iter()
            .map(|(f, to, m)| (f, to, tape.value(m).data().to_vec()))
            .collect::<Vec<_>>()
    };
    let one = messages(1.0);
    let two = messages(2.0);
    let half = messages(-0.5);
    assert!(!one.is_empty());
    for ((a, b), c) in one.iter().zip(&two).zip(&half) {
        assert_eq!((a.0, a.1), (b.0, b.1));
        for ((x, y), z) in a.2.iter().zip(&b.2).zip(&c.2) {
            assert!((2.0 * x - y).abs() < 1e-12);
            assert!((-0.5 * x - z).abs() < 1e-12);
        }
    }
    // the sum over edges equals the matrix form used by the forward pass
    let mut tape = Tape::new();
    let gv = tape.constant(g.clone());
    let prep = mp.prepare(&mut tape, &input, gv).unwrap();
    let mu = mp.init_info(&mut tape, &store, &input, &prep).unwrap();
    let inc = mp.incoming(&mut tape, &store, &prep, mu).unwrap();
    let inc = tape.value(inc).clone();
    for (k, col) in prep.columns.iter().enumerate() {
        let mut want = vec![0.0; 5];
        for (_, _, m) in one.iter().filter(|(_, to, _)| to == col) {
            for (w, x) in want.iter_mut().zip(m) {
                *w += x;
            }
        }
        for (h, w) in want.iter().enumerate() {
            assert!((inc.data()[k * 5 + h] - w).abs() < 1e-12);
        }
    }
}

#[test]
fn a_vertex_with_zero_weights_cannot_change_any_action() {
    let mut rng = RngStream::new(77, "isolation");
    for trial in 0..100 {
        let discrete = trial % 2 == 1;
        let (schema, space, extra) = if discrete {
            (
                TypeSchema::Bomber,
                ActionSpace::Discrete,
                vec![(VertexId::Agent(2), 1), (VertexId::Bomb(0), 2), (VertexId::Wall(3), 6)],
            )
        } else {
            (TypeSchema::PredatorPrey, ActionSpace::Continuous, prey(1 + rng.below(3)))
        };
        let rows = 1 + rng.below(3);
        let t = table(schema, rows, &extra);
        let (store, m) = build("message-passing", 1 + rng.below(4), shape(&t, space), trial);
        let input = random_input(t.clone(), &mut rng);
        let isolated = rows + rng.below(extra.len());
        let mut g = random_graph(rows, t.cols(), &mut rng);
        for r in 0..rows {
            g.data_mut()[r * t.cols() + isolated] = 0.0;
        }
        let before = heads(m.as_ref(), &store, &input, &g);
        let mut changed = input.clone();
        for x in changed.observations[isolated].as_mut().unwrap() {
            *x = rng.uniform_range(-5.0, 5.0);
        }
        let after = heads(m.as_ref(), &store, &changed, &g);
        for (a, b) in before.iter().zip(&after) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "trial {trial}: isolated column {isolated} leaked");
        }
    }
}

#[test]
fn zero_rounds_ignore_the_graph() {
    let t = table(TypeSchema::PredatorPrey, 3, &prey(2));
    let (store, m) = build("message-passing", 0, shape(&t, ActionSpace::Continuous), 4);
    let mut rng = RngStream::new(4, "t0");
    let input = random_input(t.clone(), &mut rng);
    let before = message_round_calls();
    let a = heads(m.as_ref(), &store, &input, &random_graph(3, 5, &mut rng));
    let b = heads(m.as_ref(), &store, &input, &random_graph(3, 5, &mut rng));
    assert_eq!(a, b);
    assert_eq!(message_round_calls(), before);
}

#[test]
fn mlp_decision_never_runs_message_rounds() {
    let t = table(TypeSchema::PredatorPrey, 2, &prey(1));
    let (store, m) = build("mlp", 5, shape(&t, ActionSpace::Continuous), 2);
    assert_eq!(m.name(), "mlp");
    let mut rng = RngStream::new(2, "mlp");
    let input = random_input(t, &mut rng);
    let before = message_round_calls();
    let h = heads(m.as_ref(), &store, &input, &random_graph(2, 3, &mut rng));
    assert_eq!(message_round_calls(), before);
    assert!(h.iter().flatten().all(|x| (-1.0..=1.0).contains(x)));

    let (mstore, mp) = build("message-passing", 5, shape(&input.table, ActionSpace::Continuous), 2);
    heads(mp.as_ref(), &mstore, &input, &random_graph(2, 3, &mut rng));
    assert_eq!(message_round_calls(), before + 5);
}

#[test]
fn unknown_decision_module_is_rejected() {
    assert!(decision_registry().get("transformer").is_err());
}

#[test]
fn absent_agent_gets_no_head() {
    let mut t = table(TypeSchema::PredatorPrey, 2, &prey(1));
    t.columns[1] = None;
    let mut rng = RngStream::new(1, "absent");
    let mut input = random_input(t.clone(), &mut rng);
    input.observations[1] = None;
    input.features[1] = None;
    for decision in ["message-passing", "mlp"] {
        let (store, m) = build(decision, 2, shape(&t, ActionSpace::Continuous), 1);
        let mut tape = Tape::new();
        let g = tape.constant(random_graph(2, 3, &mut rng));
        let out = m.forward(&mut tape, &store, &input, g).unwrap();
        assert!(out.heads[0].is_some());
        assert!(out.heads[1].is_none());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn swapping_two_same_type_vertices_leaves_actions_unchanged(seed in 0u64..10_000, rows in 1usize..4, iters in 1usize..4) {
        let t = table(TypeSchema::PredatorPrey, rows, &prey(3));
        let (store, m) = build("message-passing", iters, shape(&t, ActionSpace::Continuous), seed);
        let mut rng = RngStream::new(seed, "perm");
        let input = random_input(t.clone(), &mut rng);
        let g = random_graph(rows, t.cols(), &mut rng);
        let (a, b) = (rows, rows + 2);
        let mut swapped = input.clone();
        swapped.observations.swap(a, b);
        let mut gs = g.clone();
        let c = t.cols();
        for r in 0..rows {
            gs.data_mut().swap(r * c + a, r * c + b);
        }
        let h1 = heads(m.as_ref(), &store, &input, &g);
        let h2 = heads(m.as_ref(), &store, &swapped, &gs);
        for (x, y) in h1.iter().flatten().zip(h2.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn heads_have_the_action_space_shape(seed in 0u64..10_000, discrete: bool, mlp: bool) {
        let (schema, space, extra) = if discrete {
            (TypeSchema::Bomber, ActionSpace::Discrete, vec![(VertexId::Agent(2), 1), (VertexId::Agent(3), 1)])
        } else {
            (TypeSchema::PredatorPrey, ActionSpace::Continuous, prey(1))
        };
        let t = table(schema, 2, &extra);
        let decision = if mlp { "mlp" } else { "message-passing" };
        let (store, m) = build(decision, 2, shape(&t, space), seed);
        let mut rng = RngStream::new(seed, "heads");
        let input = random_input(t.clone(), &mut rng);
        let h = heads(m.as_ref(), &store, &input, &random_graph(2, t.cols(), &mut rng));
        for head in h {
            if discrete {
                prop_assert_eq!(head.len(), 6);
                let (_, enc) = magnet_core::actor::choose_action(&head, space, 0.5, &mut rng).unwrap();
                prop_assert_eq!(enc.iter().filter(|x| **x == 1.0).count(), 1);
                prop_assert_eq!(enc.iter().sum::<f64>(), 1.0);
            } else {
                prop_assert_eq!(head.len(), 2);
                prop_assert!(head.iter().all(|x| (-1.0..=1.0).contains(x)));
            }
        }
    }
}
