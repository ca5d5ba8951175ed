//! Finite-difference gradient suite over every layer kind, the graph
//! generation network (both cores) and the decision modules on a toy
//! three-vertex graph.

use std::rc::Rc;

use serde::Serialize;

use crate::actor::{decision_registry, ActorConfig, ActorShape, DecisionInput};
use crate::autodiff::{check_gradients, check_param_gradients, ParamStore, RngStream, Tape, Tensor, Var};
use crate::envs::{ActionSpace, StateTensor, VertexId};
use crate::error::Result;
use crate::graph::{graph_heuristic_loss, graph_temporal_loss, EdgeTarget, Ggn, GgnConfig, GgnInput, TypeSchema, TypedVertex, VertexTable};
use crate::nn::{ConvPool, Dense, LayerSpec, LstmCell, SelfAttentionEncoder, Sequential};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Coordinates probed per parameter tensor.
const MAX_COORDS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).expect("shape")
}

/// Random linear functional `Σ cᵢ yᵢ`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(seed, "projection");
    let c: Vec<f64> = (0..tape.value(y).len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let m = tape.mul_const(y, Rc::new(c))?;
    Ok(tape.sum(m))
}

/// Moves every parameter off its initial value: zero biases on inputs
/// with exact zeros would put ReLU and max-pool exactly on their kinks,
/// where central differences and the analytic one-sided choice disagree.
fn jitter(store: &mut ParamStore, rng: &mut RngStream) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.uniform_range(-0.1, 0.1);
        }
    }
}

fn case(name: &str, seed: u64, err: f64) -> GradcheckCase {
    GradcheckCase {
        name: name.to_string(),
        seed,
        max_rel_err: err,
    }
}

fn dense_case(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = RngStream::new(seed, "gc.dense");
    let mut store = ParamStore::new();
    let d = Dense::new(&mut store, "d", 4, 3, &mut rng);
    let x = random(&[2, 4], &mut rng);
    jitter(&mut store, &mut rng);
    let p = check_param_gradients(
        &mut store,
        |t, s| {
            let xv = t.constant(x.clone());
            let y = d.forward(t, s, xv)?;
            project(t, y, seed)
        },
        GRADCHECK_EPS,
        Some(MAX_COORDS),
    )?;
    let i = check_gradients(
        |t, xv| {
            let y = d.forward(t, &store, xv)?;
            project(t, y, seed)
        },
        &x,
        GRADCHECK_EPS,
    )?;
    Ok(vec![case("dense", seed, p.max(i))])
}

fn sequential_case(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = RngStream::new(seed, "gc.seq");
    let mut store = ParamStore::new();
    let specs = [
        LayerSpec::Dense { input: 5, output: 6 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.3 },
        LayerSpec::Dense { input: 6, output: 4 },
        LayerSpec::Tanh,
    ];
    let net = Sequential::new(&mut store, "s", &specs, &mut rng)?;
    let x = random(&[3, 5], &mut rng);
    jitter(&mut store, &mut rng);
    let err = check_param_gradients(
        &mut store,
        |t, s| {
            // a fresh stream per evaluation keeps the dropout mask fixed
            let mut drop = RngStream::new(seed, "gc.dropout");
            let xv = t.constant(x.clone());
            let y = net.forward(t, s, xv, &mut drop, true)?;
            project(t, y, seed)
        },
        GRADCHECK_EPS,
        Some(MAX_COORDS),
    )?;
    Ok(vec![case("relu-tanh-dropout", seed, err)])
}

fn lstm_case(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = RngStream::new(seed, "gc.lstm");
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "l", 3, 4, &mut rng);
    let h = random(&[2, 4], &mut rng);
    let c = random(&[2, 4], &mut rng);
    let x = random(&[2, 3], &mut rng);
    jitter(&mut store, &mut rng);
    let err = check_param_gradients(
        &mut store,
        |t, s| {
            let (hv, cv, xv) = (t.constant(h.clone()), t.constant(c.clone()), t.constant(x.clone()));
            let (h1, c1) = cell.step(t, s, hv, cv, xv)?;
            // two steps so the recurrent weights see a non-constant hidden state
            let (h2, c2) = cell.step(t, s, h1, c1, xv)?;
            let both = t.concat_cols(&[h2, c2])?;
            project(t, both, seed)
        },
        GRADCHECK_EPS,
        Some(MAX_COORDS),
    )?;
    Ok(vec![case("lstm-cell", seed, err)])
}

fn attention_case(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = RngStream::new(seed, "gc.attn");
    let mut store = ParamStore::new();
    let enc = SelfAttentionEncoder::new(&mut store, "a", 4, 2, 6, &mut rng)?;
    let x = random(&[3, 4], &mut rng);
    jitter(&mut store, &mut rng);
    let p = check_param_gradients(
        &mut store,
        |t, s| {
            let xv = t.constant(x.clone());
            let y = enc.forward(t, s, xv)?.output;
            project(t, y, seed)
        },
        GRADCHECK_EPS,
        Some(MAX_COORDS),
    )?;
    let i = check_gradients(
        |t, xv| {
            let y = enc.forward(t, &store, xv)?.output;
            project(t, y, seed)
        },
        &x,
        GRADCHECK_EPS,
    )?;
    Ok(vec![case("self-attention", seed, p.max(i))])
}

fn conv_case(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = RngStream::new(seed, "gc.conv");
    let mut store = ParamStore::new();
    let conv = ConvPool::new(&mut store, "c", 2, 2, 3, &mut rng);
    let x = random(&[5, 5, 2], &mut rng);
    jitter(&mut store, &mut rng);
    let p = check_param_gradients(
        &mut store,
        |t, s| {
            let xv = t.constant(x.clone());
            let y = conv.forward(t, s, xv)?;
            project(t, y, seed)
        },
        GRADCHECK_EPS,
        Some(MAX_COORDS),
    )?;
    let i = check_gradients(
        |t, xv| {
            let y = conv.forward(t, &store, xv)?;
            project(t, y, seed)
        },
        &x,
        GRADCHECK_EPS,
    )?;
    Ok(vec![case("conv-pool", seed, p.max(i))])
}

/// Softmax, layer norm, gather, element-wise and reduction primitives.
fn primitives_case(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = RngStream::new(seed, "gc.ops");
    let x = random(&[3, 4], &mut rng);
    let g = random(&[4], &mut rng);
    let b = random(&[4], &mut rng);
    let err = check_gradients(
        |t, xv| {
            let sm = t.softmax_rows(xv);
            let gv = t.constant(g.clone());
            let bv = t.constant(b.clone());
            let ln = t.layer_norm_rows(xv, 1e-9);
            let ln = t.mul_row(ln, gv)?;
            let ln = t.add_row(ln, bv)?;
            let s = t.sigmoid(ln);
            let prod = t.mul(sm, s)?;
            let xt = t.transpose(xv);
            let mm = t.matmul(prod, xt)?;
            let sq = t.square(mm);
            let picked = t.gather(sq, Rc::new(vec![0, 4, 8, 2]), vec![2, 2])?;
            let m = t.mean(picked);
            let tot = project(t, prod, seed)?;
            t.add(m, tot)
        },
        &x,
        GRADCHECK_EPS,
    )?;
    Ok(vec![case("primitives", seed, err)])
}

fn ggn_cases(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut out = Vec::new();
    let (grid, channels, rows, cols, aw) = (6, 3, 2, 4, 4);
    let mut rng = RngStream::new(seed, "gc.ggn");
    let mut states: Vec<StateTensor> = Vec::new();
    for _ in 0..3 {
        let mut s = StateTensor::new(grid, channels);
        for x in 0..grid {
            for y in 0..grid {
                for k in 0..channels {
                    if rng.bernoulli(0.5) {
                        s.set((x, y), k);
                    }
                }
            }
        }
        states.push(s);
    }
    let input = GgnInput {
        states: [states[0].clone(), states[1].clone(), states[2].clone()],
        actions: [
            (0..aw).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            (0..aw).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        ],
        prev_graph: random(&[rows, cols], &mut rng),
    };
    let mut mask = vec![1.0; rows * cols];
    mask[0] = 0.0;
    mask[cols + 1] = 0.0;
    mask[cols - 1] = 0.0;
    for core in ["mlp", "self-attention"] {
        let cfg = GgnConfig {
            core: core.into(),
            kernel: 3,
            filters: 2,
            token_width: 6,
            mlp_sizes: vec![12, 8],
            heads: 2,
            attention_ff: 8,
            head_hidden: 8,
            dropout: 0.2,
        };
        let mut store = ParamStore::new();
        let ggn = Ggn::new(&mut store, "g", &cfg, grid, channels, rows, cols, aw, &mut rng.derive(core))?;
        let prev = input.prev_graph.clone();
        let events = [EdgeTarget {
            row: 1,
            col: 2,
            target: 0.5,
        }];
        jitter(&mut store, &mut rng);
        let err = check_param_gradients(
            &mut store,
            |t, s| {
                let mut drop = RngStream::new(seed, "gc.ggn.dropout");
                let w = ggn.forward(t, s, &input, &mask, &mut drop, true)?;
                let lt = graph_temporal_loss(t, w, &prev)?;
                let lh = graph_heuristic_loss(t, w, &prev, &events)?;
                let p = project(t, w, seed)?;
                let l = t.add(lt, lh)?;
                t.add(l, p)
            },
            GRADCHECK_EPS,
            Some(MAX_COORDS),
        )?;
        out.push(case(&format!("ggn-{core}"), seed, err));
    }
    Ok(out)
}

/// Two agents of the learning team and one more vertex: a prey in
/// predator-prey, an enemy agent in the bomber schema.
fn toy_input(schema: TypeSchema, obs_width: usize, feature_width: usize, rng: &mut RngStream) -> DecisionInput {
    let third = match schema {
        TypeSchema::PredatorPrey => (VertexId::Prey(0), 2),
        TypeSchema::Bomber => (VertexId::Agent(2), 1),
    };
    let kinds = [(VertexId::Agent(0), 0), (VertexId::Agent(1), 0), third];
    let columns = kinds
        .iter()
        .enumerate()
        .map(|(c, (id, t))| {
            Some(TypedVertex {
                id: *id,
                column: c,
                vertex_type: *t,
                pos: (c, c + 1),
                scalar: 0.0,
            })
        })
        .collect();
    let table = VertexTable {
        schema,
        rows: 2,
        columns,
    };
    let mut vec = |n: usize| (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<_>>();
    DecisionInput {
        table,
        observations: (0..3).map(|_| Some(vec(obs_width))).collect(),
        features: (0..2).map(|_| Some(vec(feature_width))).collect(),
    }
}

fn actor_cases(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut out = Vec::new();
    let setups = [
        ("message-passing", TypeSchema::PredatorPrey, ActionSpace::Continuous),
        ("message-passing", TypeSchema::Bomber, ActionSpace::Discrete),
        ("mlp", TypeSchema::PredatorPrey, ActionSpace::Continuous),
    ];
    for (decision, schema, space) in setups {
        let mut rng = RngStream::new(seed, "gc.actor");
        let shape = ActorShape {
            schema,
            rows: 2,
            cols: 3,
            obs_width: 5,
            feature_width: 3,
            action_space: space,
        };
        let cfg = ActorConfig {
            decision: decision.into(),
            hidden: 4,
            mp_iterations: 2,
            init_hidden: vec![5],
            message_hidden: vec![4],
            choice_hidden: vec![5],
            fallback_hidden: vec![6, 4],
        };
        let mut store = ParamStore::new();
        let ctor = decision_registry().get(decision)?;
        let actor = ctor(&mut store, "actor", &cfg, shape, &mut rng)?;
        let input = toy_input(schema, 5, 3, &mut rng);
        let mut graph = random(&[2, 3], &mut rng);
        graph.data_mut()[0] = 0.0;
        graph.data_mut()[4] = 0.0;
        let objective = |t: &mut Tape, s: &ParamStore, g: Var| -> Result<Var> {
            let out = actor.forward(t, s, &input, g)?;
            let heads: Vec<Var> = out.heads.into_iter().flatten().collect();
            let all = t.concat_cols(&heads)?;
            project(t, all, seed)
        };
        jitter(&mut store, &mut rng);
        let p = check_param_gradients(
            &mut store,
            |t, s| {
                let g = t.constant(graph.clone());
                objective(t, s, g)
            },
            GRADCHECK_EPS,
            Some(MAX_COORDS),
        )?;
        let g = check_gradients(|t, gv| objective(t, &store, gv), &graph, GRADCHECK_EPS)?;
        let label = match space {
            ActionSpace::Continuous => "continuous",
            ActionSpace::Discrete => "discrete",
        };
        out.push(case(&format!("actor-{decision}-{label}"), seed, p.max(g)));
    }
    Ok(out)
}

/// Runs every check for every seed.
pub fn gradcheck_suite(seeds: &[u64]) -> Result<Vec<GradcheckCase>> {
    let checks: [fn(u64) -> Result<Vec<GradcheckCase>>; 8] = [
        dense_case,
        sequential_case,
        lstm_case,
        attention_case,
        conv_case,
        primitives_case,
        ggn_cases,
        actor_cases,
    ];
    let mut out = Vec::new();
    for &s in seeds {
        for f in checks {
            out.extend(f(s)?);
        }
    }
    Ok(out)
}

/// Three-state deterministic MDP used to check that the team critic
/// regresses to its Bellman fixed point. Actions are the continuous
/// encodings `left = [-1, 0]` and `right = [1, 0]`; the evaluated policy
/// always goes right.
///
/// * `right` from 0 or 1 moves one state up with reward 0; from 2 it pays 1
///   and ends the episode.
/// * `left` from 1 or 2 moves one state down with reward 0; from 0 it
///   stays and pays 0.1.
pub mod tabular {
    pub const STATES: usize = 3;
    pub const ACTIONS: [[f64; 2]; 2] = [[-1.0, 0.0], [1.0, 0.0]];
    pub const RIGHT: usize = 1;

    /// `(next state, reward, done)`.
    pub fn step(s: usize, a: usize) -> (usize, f64, bool) {
        match (s, a) {
            (2, RIGHT) => (2, 1.0, true),
            (s, RIGHT) => (s + 1, 0.0, false),
            (0, _) => (0, 0.1, false),
            (s, _) => (s - 1, 0.0, false),
        }
    }

    /// `Q^π(s, a)` for the always-right policy by iterating the Bellman
    /// operator on a table until it stops changing.
    pub fn fixed_point(gamma: f64) -> [[f64; 2]; STATES] {
        let mut q = [[0.0f64; 2]; STATES];
        loop {
            let mut next = q;
            for (s, row) in next.iter_mut().enumerate() {
                for (a, v) in row.iter_mut().enumerate() {
                    let (s2, r, done) = step(s, a);
                    *v = r + if done { 0.0 } else { gamma * q[s2][RIGHT] };
                }
            }
            let delta = next.iter().flatten().zip(q.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            q = next;
            if delta < 1e-14 {
                return q;
            }
        }
    }
}

/// Trains the registered team critic on every transition of the tabular
/// MDP with Bellman targets from a Polyak-averaged target copy, and
/// returns the largest deviation from the value-iteration fixed point.
pub fn critic_tabular_check(seed: u64, iterations: usize) -> Result<f64> {
    use crate::autodiff::Optimizer;
    use crate::training::{bellman_targets, critic_loss, critic_registry, CriticLayers, CriticSample, CriticShape};

    let gamma = 0.9;
    let shape = CriticShape {
        grid: 4,
        channels: 1,
        rows: 1,
        action_width: 2,
        feature_width: 2,
    };
    let layers = CriticLayers {
        kernel: 2,
        filters: 2,
        hidden: vec![16],
    };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed, "tabular-critic");
    let critic = critic_registry().get("team")?(&mut store, "critic", shape, &layers, &mut rng)?;
    let mut target = store.clone();
    let mut opt = Optimizer::adam(5e-3);
    let sample = |s: usize| {
        let mut g = StateTensor::new(4, 1);
        g.set((s, 0), 0);
        CriticSample {
            state: g,
            features: vec![vec![0.0; 2]],
        }
    };
    let states: Vec<CriticSample> = (0..tabular::STATES).map(sample).collect();
    let pairs: Vec<(usize, usize)> = (0..tabular::STATES).flat_map(|s| [(s, 0), (s, 1)]).collect();
    let joint = |pairs: &[(usize, usize)]| -> Result<Tensor> {
        let data = pairs.iter().flat_map(|(_, a)| tabular::ACTIONS[*a]).collect();
        Tensor::matrix(pairs.len(), 2, data)
    };
    let evaluate = |store: &ParamStore, pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let a = tape.constant(joint(pairs)?);
        let refs: Vec<&CriticSample> = pairs.iter().map(|(s, _)| &states[*s]).collect();
        let q = critic.q(&mut tape, store, &refs, a)?;
        Ok(tape.value(q).data().to_vec())
    };
    let next: Vec<(usize, f64, bool)> = pairs.iter().map(|(s, a)| tabular::step(*s, *a)).collect();
    let next_pairs: Vec<(usize, usize)> = next.iter().map(|(s2, _, _)| (*s2, tabular::RIGHT)).collect();
    let rewards: Vec<f64> = next.iter().map(|n| n.1).collect();
    let done: Vec<bool> = next.iter().map(|n| n.2).collect();
    for _ in 0..iterations {
        let next_q = evaluate(&target, &next_pairs)?;
        let targets = bellman_targets(&rewards, &next_q, &done, gamma)?;
        let mut tape = Tape::new();
        let a = tape.constant(joint(&pairs)?);
        let refs: Vec<&CriticSample> = pairs.iter().map(|(s, _)| &states[*s]).collect();
        let q = critic.q(&mut tape, &store, &refs, a)?;
        let loss = critic_loss(&mut tape, q, &targets)?;
        tape.backward(loss)?;
        store.zero_grad();
        tape.accumulate_param_grads(&mut store);
        opt.step(&mut store)?;
        target.soft_update_from(&store, 0.05)?;
    }
    let want = tabular::fixed_point(gamma);
    let got = evaluate(&store, &pairs)?;
    Ok(pairs
        .iter()
        .zip(&got)
        .map(|((s, a), q)| (q - want[*s][*a]).abs())
        .fold(0.0, f64::max))
}

/// Single-agent MADQN (plain DQN) on the two-step chain; returns the
/// largest deviation of the learned action values from `Q*`.
pub fn madqn_chain_check(seed: u64, episodes: usize) -> Result<f64> {
    use crate::training::{madqn_train, ChainMdp, TrainConfig};

    let tc = TrainConfig {
        episodes,
        gamma: 0.9,
        critic_lr: 5e-3,
        tau: 0.05,
        batch_size: 16,
        warmup: 32,
        train_every: 1,
        replay_capacity: 1_000,
        madqn_cycles: 1,
        madqn_epsilon: 0.5,
        ..TrainConfig::default()
    };
    let mut task = ChainMdp::new();
    let report = madqn_train(&mut task, &tc, &[16], seed)?;
    let want = ChainMdp::optimal_q(tc.gamma);
    let mut worst: f64 = 0.0;
    for (s, row) in want.iter().enumerate() {
        let q = report.nets[0].q_values(&ChainMdp::one_hot(s))?;
        for (a, v) in row.iter().enumerate() {
            worst = worst.max((q[a] - v).abs());
        }
    }
    Ok(worst)
}
