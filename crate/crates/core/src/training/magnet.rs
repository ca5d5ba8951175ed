use crate::actor::{choose_action, decision_registry, head_encoding, ActorShape, DecisionInput, DecisionModule};
use crate::autodiff::{to_checkpoint_string, load_checkpoint_str, Optimizer, ParamStore, RngStream, Tape, Tensor, Var};
use crate::config::ExperimentConfig;
use crate::envs::replay::{Replay, ReplayRecorder};
use crate::envs::{make_env, Action, ActionSpace, Environment, Event, EventKind, SparseState, StateTensor};
use crate::error::{MagnetError, Result};
use crate::graph::{
    assign_types, build_ggn_input, event_edges, graph_heuristic_loss, graph_temporal_loss, EdgeTarget, Ggn,
    GraphHistory, GraphMode, RelevanceGraph, TypeSchema, VertexTable,
};

use super::critic::{critic_registry, CriticLayers, CriticSample, CriticShape, CriticStrategy};
use super::{bellman_targets, critic_loss, EpisodeMetrics, EvalSummary, ReplayBuffer, TrainConfig, Trainer};

/// One environment step as stored in the replay buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// `X(t), X(t−1), X(t−2)` as seen by the GGN.
    pub states: [SparseState; 3],
    /// Joint action encodings at `t−1` and `t−2`.
    pub prev_actions: [Vec<f64>; 2],
    pub table: VertexTable,
    /// `graph(t−1)` per GGN.
    pub prev_graphs: Vec<Tensor>,
    /// `graph(t)` per GGN, consumed by the actor at `t`.
    pub graphs: Vec<Tensor>,
    /// Joint action encoding, `R·a` wide, zeros for absent agents.
    pub actions: Vec<f64>,
    /// One reward per row agent.
    pub rewards: Vec<f64>,
    pub next_state: SparseState,
    pub next_table: VertexTable,
    /// `graph(t+1)`; unused when `done`.
    pub next_graphs: Vec<Tensor>,
    pub events: Vec<Event>,
    pub done: bool,
}

/// Mean graph weight on edges bound to kill events versus edges with no
/// event, accumulated over probe steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EventEdgeStats {
    pub kill_sum: f64,
    pub kill_count: usize,
    pub free_sum: f64,
    pub free_count: usize,
}

impl EventEdgeStats {
    pub fn kill_mean(&self) -> f64 {
        self.kill_sum / self.kill_count.max(1) as f64
    }

    pub fn free_mean(&self) -> f64 {
        self.free_sum / self.free_count.max(1) as f64
    }

    fn record(&mut self, graphs: &[Tensor], table: &VertexTable, events: &[(EventKind, EdgeTarget)]) {
        let cols = table.cols();
        let mask = table.mask();
        let graph_of = |r: usize| if graphs.len() == 1 { &graphs[0] } else { &graphs[r] };
        for (kind, e) in events {
            if matches!(kind, EventKind::KillPrey | EventKind::KillEnemyAgent) {
                self.kill_sum += graph_of(e.row).data()[e.row * cols + e.col];
                self.kill_count += 1;
            }
        }
        for r in 0..table.rows {
            for c in 0..cols {
                if mask[r * cols + c] == 0.0 || events.iter().any(|(_, e)| e.row == r && e.col == c) {
                    continue;
                }
                self.free_sum += graph_of(r).data()[r * cols + c];
                self.free_count += 1;
            }
        }
    }
}

/// Per-row heads from the actor. In shared mode one pass over the team
/// graph; in individual mode agent `r` acts on its own graph `graphs[r]`.
pub fn team_heads(
    actor: &dyn DecisionModule,
    tape: &mut Tape,
    store: &ParamStore,
    input: &DecisionInput,
    graphs: &[Tensor],
) -> Result<Vec<Option<Var>>> {
    let rows = actor.shape().rows;
    if graphs.len() == 1 {
        let g = tape.constant(graphs[0].clone());
        return Ok(actor.forward(tape, store, input, g)?.heads);
    }
    if graphs.len() != rows {
        return Err(MagnetError::Input(format!("{} graphs for {rows} agents", graphs.len())));
    }
    let mut heads = Vec::with_capacity(rows);
    for (r, graph) in graphs.iter().enumerate() {
        if !input.table.is_present(r) {
            heads.push(None);
            continue;
        }
        let g = tape.constant(graph.clone());
        heads.push(actor.forward(tape, store, input, g)?.heads[r]);
    }
    Ok(heads)
}

/// Differentiable `[1, R·a]` joint action encoding, zeros for absent rows.
pub fn encode_joint(tape: &mut Tape, heads: &[Option<Var>], space: ActionSpace) -> Result<Var> {
    let parts: Vec<Var> = heads
        .iter()
        .map(|h| match h {
            Some(h) => head_encoding(tape, *h, space),
            None => tape.constant(Tensor::zeros(&[1, space.encoding_width()])),
        })
        .collect();
    tape.concat_cols(&parts)
}

/// Input of one actor update sample.
#[derive(Clone, Debug)]
pub struct ActorSample {
    pub input: DecisionInput,
    pub graphs: Vec<Tensor>,
    pub critic: CriticSample,
    /// Replayed joint action.
    pub recorded: Vec<f64>,
}

/// One deterministic-policy-gradient step: ascend the critic's value of the
/// actor's own actions. Returns the objective before the step.
pub fn actor_update(
    actor: &dyn DecisionModule,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    critic: &dyn CriticStrategy,
    critic_store: &ParamStore,
    batch: &[ActorSample],
    grad_clip: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(MagnetError::Input("actor update over an empty batch".into()));
    }
    let space = actor.shape().action_space;
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(batch.len());
    let mut recorded = Vec::new();
    for s in batch {
        let heads = team_heads(actor, &mut tape, store, &s.input, &s.graphs)?;
        rows.push(encode_joint(&mut tape, &heads, space)?);
        recorded.extend_from_slice(&s.recorded);
    }
    let live = tape.stack_rows(&rows)?;
    let width = tape.shape(live)[1];
    let recorded = Tensor::matrix(batch.len(), width, recorded)?;
    let samples: Vec<&CriticSample> = batch.iter().map(|s| &s.critic).collect();
    let objective = critic.actor_objective(&mut tape, critic_store, &samples, live, &recorded)?;
    let value = tape.value(objective).item();
    let loss = tape.scale(objective, -1.0);
    tape.backward(loss)?;
    store.zero_grad();
    tape.accumulate_param_grads(store);
    if grad_clip > 0.0 {
        store.clip_grad_norm(grad_clip);
    }
    opt.step(store)?;
    Ok(value)
}

/// All learnable parts of one MAGNet team.
#[derive(Debug)]
pub struct MagnetModel {
    pub shape: ActorShape,
    pub mode: GraphMode,
    pub view: usize,
    pub ggn_store: ParamStore,
    pub ggns: Vec<Ggn>,
    pub actor_store: ParamStore,
    pub actor_target: ParamStore,
    pub actor: Box<dyn DecisionModule>,
    pub critic_store: ParamStore,
    pub critic_target: ParamStore,
    pub critic: Box<dyn CriticStrategy>,
    ggn_opt: Optimizer,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
}

/// Per-step graph loss split into its temporal and event parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GraphLossBreakdown {
    pub temporal: f64,
    pub heuristic: f64,
}

impl GraphLossBreakdown {
    pub fn total(&self) -> f64 {
        self.temporal + self.heuristic
    }
}

impl MagnetModel {
    pub fn new(cfg: &ExperimentConfig, env: &dyn Environment, seed: u64) -> Result<Self> {
        let rows = env.num_rows();
        let cols = env.num_columns();
        let space = env.action_space();
        let aw = space.encoding_width();
        let (d, _, m) = env.grid().dims();
        let shape = ActorShape {
            schema: TypeSchema::for_env(env)?,
            rows,
            cols,
            obs_width: env.local_obs_width(),
            feature_width: m + 3,
            action_space: space,
        };
        let mode = cfg.model.graph_mode();
        let init = RngStream::new(seed, "init");

        let mut ggn_store = ParamStore::new();
        let ggn_cfg = cfg.model.ggn_config();
        let count = if mode == GraphMode::Shared { 1 } else { rows };
        let ggns = (0..count)
            .map(|i| {
                let name = format!("ggn{i}");
                Ggn::new(&mut ggn_store, &name, &ggn_cfg, d, m, rows, cols, rows * aw, &mut init.derive(&name))
            })
            .collect::<Result<Vec<_>>>()?;

        let actor_cfg = cfg.model.actor_config();
        let mut actor_store = ParamStore::new();
        let ctor = decision_registry().get(&actor_cfg.decision)?;
        let actor = ctor(&mut actor_store, "actor", &actor_cfg, shape, &mut init.derive("actor"))?;

        let mut critic_store = ParamStore::new();
        let critic_ctor = critic_registry().get(&cfg.model.critic)?;
        let critic = critic_ctor(
            &mut critic_store,
            "critic",
            CriticShape {
                grid: d,
                channels: m,
                rows,
                action_width: aw,
                feature_width: m + 3,
            },
            &CriticLayers {
                kernel: cfg.model.critic_kernel,
                filters: cfg.model.critic_filters,
                hidden: cfg.model.critic_hidden.clone(),
            },
            &mut init.derive("critic"),
        )?;
        let tc = &cfg.training;
        Ok(Self {
            shape,
            mode,
            view: env.config().view,
            actor_target: actor_store.clone(),
            critic_target: critic_store.clone(),
            ggn_store,
            ggns,
            actor_store,
            actor,
            critic_store,
            critic,
            ggn_opt: Optimizer::adam(tc.graph_lr),
            actor_opt: Optimizer::adam(tc.actor_lr),
            critic_opt: Optimizer::adam(tc.critic_lr),
        })
    }

    pub fn joint_width(&self) -> usize {
        self.shape.rows * self.shape.head_width()
    }

    /// Fresh per-episode graph histories, one per GGN.
    pub fn histories(&self, first: &StateTensor, rng: &RngStream) -> Vec<GraphHistory> {
        (0..self.ggns.len())
            .map(|i| {
                let mut h = GraphHistory::new(
                    self.shape.rows,
                    self.shape.cols,
                    self.joint_width(),
                    rng.derive(&format!("graph{i}")),
                );
                h.push_state(first.clone());
                h
            })
            .collect()
    }

    /// Runs every GGN on `tape`; returns the weight variables, their values
    /// and the previous graphs they were conditioned on.
    pub fn graph_forward(
        &self,
        tape: &mut Tape,
        histories: &mut [GraphHistory],
        table: &VertexTable,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<(Vec<Var>, Vec<Tensor>, Vec<Tensor>)> {
        let mask = table.mask();
        let mut vars = Vec::with_capacity(self.ggns.len());
        let mut values = Vec::with_capacity(self.ggns.len());
        let mut prevs = Vec::with_capacity(self.ggns.len());
        for (ggn, h) in self.ggns.iter().zip(histories.iter_mut()) {
            let input = build_ggn_input(h)?;
            let w = ggn.forward(tape, &self.ggn_store, &input, &mask, rng, train)?;
            values.push(tape.value(w).clone());
            prevs.push(input.prev_graph);
            vars.push(w);
        }
        Ok((vars, values, prevs))
    }

    /// Graph loss summed over GGNs: temporal term plus, when `edges` is
    /// non-empty, the event terms.
    pub fn graph_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        prevs: &[Tensor],
        edges: &[EdgeTarget],
    ) -> Result<(Var, GraphLossBreakdown)> {
        let mut total: Option<Var> = None;
        let mut breakdown = GraphLossBreakdown::default();
        for (w, prev) in vars.iter().zip(prevs) {
            let temporal = graph_temporal_loss(tape, *w, prev)?;
            let t = tape.value(temporal).item();
            let loss = if edges.is_empty() {
                temporal
            } else {
                graph_heuristic_loss(tape, *w, prev, edges)?
            };
            let l = tape.value(loss).item();
            breakdown.temporal += t;
            breakdown.heuristic += l - t;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let total = total.ok_or_else(|| MagnetError::Input("no GGN to train".into()))?;
        Ok((total, breakdown))
    }

    /// One optimiser step on `lambda · loss` for the GGN parameters only.
    pub fn graph_step(&mut self, tape: &mut Tape, loss: Var, lambda: f64, grad_clip: f64) -> Result<()> {
        let scaled = tape.scale(loss, lambda);
        tape.backward(scaled)?;
        self.ggn_store.zero_grad();
        tape.accumulate_param_grads(&mut self.ggn_store);
        if grad_clip > 0.0 {
            self.ggn_store.clip_grad_norm(grad_clip);
        }
        self.ggn_opt.step(&mut self.ggn_store)
    }

    /// Per-row `(action, encoding)` for present agents.
    pub fn act(
        &self,
        input: &DecisionInput,
        graphs: &[Tensor],
        sigma: f64,
        rng: &mut RngStream,
    ) -> Result<Vec<Option<(Action, Vec<f64>)>>> {
        let mut tape = Tape::new();
        let heads = team_heads(self.actor.as_ref(), &mut tape, &self.actor_store, input, graphs)?;
        heads
            .into_iter()
            .map(|h| {
                h.map(|h| choose_action(tape.value(h).data(), self.shape.action_space, sigma, rng))
                    .transpose()
            })
            .collect()
    }

    fn critic_sample(&self, state: StateTensor, input: &DecisionInput) -> CriticSample {
        CriticSample::new(state, input, self.shape.feature_width)
    }

    /// Critic step on Bellman targets from the target networks, then an
    /// actor step, then Polyak averaging. Returns `(critic loss, actor
    /// objective)`.
    pub fn update(&mut self, batch: &[&Transition], tc: &TrainConfig) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(MagnetError::Input("update over an empty batch".into()));
        }
        let k = self.critic.outputs();
        let space = self.shape.action_space;
        let mut now = Vec::with_capacity(batch.len());
        for t in batch {
            let s = t.states[0].to_dense();
            let input = DecisionInput::from_grid(&s, &t.table, self.view);
            let cs = self.critic_sample(s, &input);
            now.push(ActorSample {
                input,
                graphs: t.graphs.clone(),
                critic: cs,
                recorded: t.actions.clone(),
            });
        }

        // targets y = r + γ Q'(s', μ'(s'))
        let mut next_q = vec![0.0; batch.len() * k];
        let live: Vec<usize> = (0..batch.len()).filter(|i| !batch[*i].done).collect();
        if !live.is_empty() {
            let mut tape = Tape::new();
            let mut rows = Vec::with_capacity(live.len());
            let mut samples = Vec::with_capacity(live.len());
            for &i in &live {
                let t = batch[i];
                let s = t.next_state.to_dense();
                let input = DecisionInput::from_grid(&s, &t.next_table, self.view);
                let heads = team_heads(self.actor.as_ref(), &mut tape, &self.actor_target, &input, &t.next_graphs)?;
                rows.push(encode_joint(&mut tape, &heads, space)?);
                samples.push(self.critic_sample(s, &input));
            }
            let joint = tape.stack_rows(&rows)?;
            let refs: Vec<&CriticSample> = samples.iter().collect();
            let q = self.critic.q(&mut tape, &self.critic_target, &refs, joint)?;
            let qv = tape.value(q).data();
            for (j, &i) in live.iter().enumerate() {
                next_q[i * k..(i + 1) * k].copy_from_slice(&qv[j * k..(j + 1) * k]);
            }
        }
        let mut rewards = Vec::with_capacity(batch.len() * k);
        let mut done = Vec::with_capacity(batch.len() * k);
        for t in batch {
            rewards.extend(self.critic.rewards(&t.rewards));
            done.extend(std::iter::repeat(t.done).take(k));
        }
        let targets = bellman_targets(&rewards, &next_q, &done, tc.gamma)?;

        let mut tape = Tape::new();
        let joint: Vec<f64> = batch.iter().flat_map(|t| t.actions.iter().copied()).collect();
        let joint = tape.constant(Tensor::matrix(batch.len(), self.joint_width(), joint)?);
        let refs: Vec<&CriticSample> = now.iter().map(|s| &s.critic).collect();
        let q = self.critic.q(&mut tape, &self.critic_store, &refs, joint)?;
        let loss = critic_loss(&mut tape, q, &targets)?;
        let loss_value = tape.value(loss).item();
        tape.backward(loss)?;
        self.critic_store.zero_grad();
        tape.accumulate_param_grads(&mut self.critic_store);
        if tc.grad_clip > 0.0 {
            self.critic_store.clip_grad_norm(tc.grad_clip);
        }
        self.critic_opt.step(&mut self.critic_store)?;

        let objective = actor_update(
            self.actor.as_ref(),
            &mut self.actor_store,
            &mut self.actor_opt,
            self.critic.as_ref(),
            &self.critic_store,
            &now,
            tc.grad_clip,
        )?;

        self.actor_target.soft_update_from(&self.actor_store, tc.tau)?;
        self.critic_target.soft_update_from(&self.critic_store, tc.tau)?;
        Ok((loss_value, -objective))
    }

    fn stores(&self) -> [(&str, &ParamStore); 5] {
        [
            ("", &self.ggn_store),
            ("", &self.actor_store),
            ("target.", &self.actor_target),
            ("", &self.critic_store),
            ("target.", &self.critic_target),
        ]
    }

    /// Every parameter, target copies prefixed with `target.`.
    pub fn combined_store(&self) -> ParamStore {
        let mut all = ParamStore::new();
        for (prefix, store) in self.stores() {
            for (_, p) in store.iter() {
                all.add(format!("{prefix}{}", p.name), p.value.clone());
            }
        }
        all
    }

    pub fn checkpoint(&self) -> String {
        to_checkpoint_string(&self.combined_store())
    }

    pub fn load_checkpoint(&mut self, text: &str) -> Result<()> {
        let mut all = self.combined_store();
        load_checkpoint_str(&mut all, text)?;
        let copy = |prefix: &str, store: &mut ParamStore| {
            for id in store.ids().collect::<Vec<_>>() {
                let name = format!("{prefix}{}", store.get(id).name);
                let src = all.lookup(&name).expect("combined store has every name");
                store.get_mut(id).value = all.value(src).clone();
            }
        };
        copy("", &mut self.ggn_store);
        copy("", &mut self.actor_store);
        copy("target.", &mut self.actor_target);
        copy("", &mut self.critic_store);
        copy("target.", &mut self.critic_target);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EpisodeKind {
    /// Scripted team, graph loss optimised.
    Pretrain,
    /// Scripted team, nothing optimised; kill/free edge weights recorded.
    Probe,
    /// Learned team with exploration; everything optimised.
    Train,
    /// Learned team, greedy, nothing optimised.
    Eval,
}

#[derive(Clone, Debug, Default)]
struct EpisodeStats {
    ret: f64,
    steps: u64,
    win: bool,
    critic: Vec<f64>,
    actor: Vec<f64>,
    graph: Vec<GraphLossBreakdown>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Environment seed of episode `e` in a split (training, evaluation, …).
pub fn episode_seed(seed: u64, split: u64, e: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(e)
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_PRETRAIN: u64 = 2;
const SPLIT_EVAL: u64 = 3;
const SPLIT_PROBE: u64 = 4;

/// DDPG learner whose actor is the relevance-graph decision network.
pub struct MagnetTrainer {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub env: Box<dyn Environment>,
    pub model: MagnetModel,
    pub buffer: ReplayBuffer<Transition>,
    noise: RngStream,
    sampler: RngStream,
    /// Environment steps taken in training episodes.
    pub steps: u64,
    pub updates: u64,
    /// Updates skipped because of non-finite gradients.
    pub incidents: u64,
    pretrained: usize,
    /// Most recent graphs of the last episode, for inspection and export.
    pub last_graphs: Vec<RelevanceGraph>,
    record_next: bool,
    replay: Option<Replay>,
}

impl std::fmt::Debug for MagnetTrainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MagnetTrainer")
            .field("seed", &self.seed)
            .field("steps", &self.steps)
            .field("updates", &self.updates)
            .finish_non_exhaustive()
    }
}

impl MagnetTrainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut env = make_env(&cfg.env)?;
        env.reset(episode_seed(seed, 0, 0))?;
        let model = MagnetModel::new(cfg, env.as_ref(), seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            model,
            env,
            buffer: ReplayBuffer::new(cfg.training.replay_capacity),
            noise: RngStream::new(seed, "noise"),
            sampler: RngStream::new(seed, "sampler"),
            steps: 0,
            updates: 0,
            incidents: 0,
            pretrained: 0,
            last_graphs: Vec::new(),
            record_next: false,
            replay: None,
        })
    }

    fn run_episode(&mut self, env_seed: u64, kind: EpisodeKind, probe: &mut EventEdgeStats) -> Result<EpisodeStats> {
        let tc = self.cfg.training.clone();
        let first = self.env.reset(env_seed)?;
        let mut recorder = if std::mem::take(&mut self.record_next) {
            Some(ReplayRecorder::start(self.env.as_ref(), env_seed))
        } else {
            None
        };
        let ep_rng = RngStream::new(env_seed, "episode");
        let mut scripted_rng = ep_rng.derive("scripted");
        let mut dropout_rng = ep_rng.derive("dropout");
        let mut histories = self.model.histories(&first, &ep_rng);
        let learners = self.env.learners();
        let rows = learners.len();
        let space = self.env.action_space();
        let aw = space.encoding_width();
        let train_graph = matches!(kind, EpisodeKind::Pretrain | EpisodeKind::Train) && tc.lambda > 0.0;
        let mut stats = EpisodeStats::default();
        let mut pending: Option<Transition> = None;
        let mut table = assign_types(self.env.as_ref())?;

        loop {
            let mut tape = Tape::new();
            let (vars, graphs, prevs) =
                self.model
                    .graph_forward(&mut tape, &mut histories, &table, &mut dropout_rng, train_graph)?;
            if let Some(mut p) = pending.take() {
                p.next_graphs = graphs.clone();
                self.buffer.push(p);
            }
            let grid = self.env.grid().clone();
            let mut joint = self.env.scripted_joint_action(&mut scripted_rng);
            let mut row_enc = vec![vec![0.0; aw]; rows];
            match kind {
                EpisodeKind::Pretrain | EpisodeKind::Probe => {
                    for (r, a) in learners.iter().enumerate() {
                        if self.env.is_alive(*a) {
                            row_enc[r] = joint[*a].encode();
                        }
                    }
                }
                EpisodeKind::Train | EpisodeKind::Eval => {
                    let sigma = if kind == EpisodeKind::Train { tc.sigma_at(self.steps) } else { 0.0 };
                    let input = DecisionInput::from_grid(&grid, &table, self.model.view);
                    let acts = self.model.act(&input, &graphs, sigma, &mut self.noise)?;
                    for (r, a) in learners.iter().enumerate() {
                        match &acts[r] {
                            Some((action, enc)) if self.env.is_alive(*a) => {
                                joint[*a] = *action;
                                row_enc[r] = enc.clone();
                            }
                            _ => joint[*a] = Action::noop(space),
                        }
                    }
                }
            }
            let joint_enc = row_enc.concat();
            let outcome = self.env.step(&joint)?;
            if let Some(r) = recorder.as_mut() {
                r.record(self.env.as_ref(), &joint, &outcome.rewards, &outcome.events);
            }

            let kinds_edges: Vec<(EventKind, EdgeTarget)> = outcome
                .events
                .iter()
                .filter_map(|e| {
                    event_edges(self.env.as_ref(), std::slice::from_ref(e), self.env.config().event_scale)
                        .first()
                        .map(|t| (e.kind, *t))
                })
                .collect();
            if train_graph {
                let edges: Vec<EdgeTarget> = if tc.dsh {
                    kinds_edges.iter().map(|(_, e)| *e).collect()
                } else {
                    Vec::new()
                };
                let (loss, breakdown) = self.model.graph_loss(&mut tape, &vars, &prevs, &edges)?;
                log::trace!(
                    "graph loss temporal={:.6} heuristic={:.6} events={}",
                    breakdown.temporal,
                    breakdown.heuristic,
                    edges.len()
                );
                match self.model.graph_step(&mut tape, loss, tc.lambda, tc.grad_clip) {
                    Ok(()) => stats.graph.push(breakdown),
                    Err(MagnetError::Numeric { name, detail }) => {
                        log::warn!("graph step skipped: {name}: {detail}");
                        self.incidents += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if kind == EpisodeKind::Probe {
                probe.record(&graphs, &table, &kinds_edges);
            }

            let row_rewards: Vec<f64> = learners.iter().map(|a| outcome.rewards[*a]).collect();
            stats.ret += mean(&row_rewards);
            stats.steps += 1;
            let next_table = assign_types(self.env.as_ref())?;

            if kind == EpisodeKind::Train {
                // histories still end at X(t) here
                let window = build_ggn_input(&mut histories[0])?;
                let t = Transition {
                    states: window.states.map(|s| s.to_sparse()),
                    prev_actions: window.actions,
                    table: table.clone(),
                    prev_graphs: prevs.clone(),
                    graphs: graphs.clone(),
                    actions: joint_enc.clone(),
                    rewards: row_rewards,
                    next_state: outcome.observation.to_sparse(),
                    next_table: next_table.clone(),
                    next_graphs: graphs.clone(),
                    events: outcome.events.clone(),
                    done: outcome.done,
                };
                if outcome.done {
                    self.buffer.push(t);
                } else {
                    pending = Some(t);
                }
            }

            for (h, g) in histories.iter_mut().zip(&graphs) {
                h.set_graph(g.clone());
                h.push_action(joint_enc.clone())?;
                h.push_state(outcome.observation.clone());
            }
            if outcome.done {
                self.last_graphs = graphs
                    .iter()
                    .map(|w| RelevanceGraph {
                        weights: w.clone(),
                        table: table.clone(),
                        tick: self.env.tick().saturating_sub(1),
                    })
                    .collect();
            }
            table = next_table;

            if kind == EpisodeKind::Train {
                self.steps += 1;
                let ready = self.buffer.len() >= tc.warmup.max(tc.batch_size);
                if ready && self.steps % tc.train_every as u64 == 0 {
                    let batch = self.buffer.sample(tc.batch_size, &mut self.sampler)?;
                    match self.model.update(&batch, &tc) {
                        Ok((lc, la)) => {
                            self.updates += 1;
                            stats.critic.push(lc);
                            stats.actor.push(la);
                        }
                        Err(MagnetError::Numeric { name, detail }) => {
                            log::warn!("update skipped: {name}: {detail}");
                            self.incidents += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            if outcome.done {
                break;
            }
        }
        if let Some(r) = recorder {
            self.replay = Some(r.finish());
        }
        let team = self.env.team_of(learners[0]);
        stats.win = self.env.winner() == Some(team);
        Ok(stats)
    }

    /// Graph pre-training with scripted agents. Only the GGN parameters are
    /// optimised; returns the mean loss breakdown of each episode.
    pub fn pretrain_graph(&mut self, episodes: usize) -> Result<Vec<GraphLossBreakdown>> {
        let mut trace = Vec::with_capacity(episodes);
        let mut probe = EventEdgeStats::default();
        for _ in 0..episodes {
            let e = self.pretrained as u64;
            self.pretrained += 1;
            let s = self.run_episode(episode_seed(self.seed, SPLIT_PRETRAIN, e), EpisodeKind::Pretrain, &mut probe)?;
            let n = s.graph.len().max(1) as f64;
            trace.push(GraphLossBreakdown {
                temporal: s.graph.iter().map(|b| b.temporal).sum::<f64>() / n,
                heuristic: s.graph.iter().map(|b| b.heuristic).sum::<f64>() / n,
            });
        }
        Ok(trace)
    }

    /// Scripted episodes without learning that record the current GGN's
    /// weights on kill-event edges and on event-free edges.
    pub fn probe_event_edges(&mut self, episodes: usize, seed: u64) -> Result<EventEdgeStats> {
        let mut probe = EventEdgeStats::default();
        for e in 0..episodes as u64 {
            self.run_episode(episode_seed(seed, SPLIT_PROBE, e), EpisodeKind::Probe, &mut probe)?;
        }
        Ok(probe)
    }
}

impl Trainer for MagnetTrainer {
    fn name(&self) -> &'static str {
        "magnet"
    }

    fn pretrain(&mut self, episodes: usize) -> Result<Vec<f64>> {
        Ok(self.pretrain_graph(episodes)?.iter().map(|b| b.total()).collect())
    }

    fn train_episode(&mut self, episode: usize) -> Result<EpisodeMetrics> {
        let mut probe = EventEdgeStats::default();
        let s = self.run_episode(episode_seed(self.seed, SPLIT_TRAIN, episode as u64), EpisodeKind::Train, &mut probe)?;
        Ok(EpisodeMetrics {
            episode,
            seed: self.seed,
            win: s.win as u8,
            ret: s.ret,
            steps: s.steps,
            loss_critic: mean(&s.critic),
            loss_actor: mean(&s.actor),
            loss_graph: mean(&s.graph.iter().map(|b| b.total()).collect::<Vec<_>>()),
        })
    }

    fn evaluate(&mut self, episodes: usize, seed: u64) -> Result<EvalSummary> {
        let mut probe = EventEdgeStats::default();
        let mut wins = 0;
        let mut ret = 0.0;
        let mut steps = 0.0;
        for e in 0..episodes as u64 {
            let s = self.run_episode(episode_seed(seed, SPLIT_EVAL, e), EpisodeKind::Eval, &mut probe)?;
            wins += s.win as usize;
            ret += s.ret;
            steps += s.steps as f64;
        }
        let n = episodes.max(1) as f64;
        Ok(EvalSummary {
            episodes,
            wins,
            mean_return: ret / n,
            mean_steps: steps / n,
        })
    }

    fn checkpoint(&self) -> String {
        self.model.checkpoint()
    }

    fn load_checkpoint(&mut self, text: &str) -> Result<()> {
        self.model.load_checkpoint(text)
    }

    fn record_next_episode(&mut self) {
        self.record_next = true;
    }

    fn take_replay(&mut self) -> Option<Replay> {
        self.replay.take()
    }

    fn latest_graphs(&self) -> Vec<RelevanceGraph> {
        self.last_graphs.clone()
    }
}
