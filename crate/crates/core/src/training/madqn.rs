use std::rc::Rc;

use crate::autodiff::{Optimizer, ParamStore, RngStream, Tape, Tensor};
use crate::config::ExperimentConfig;
use crate::envs::{make_env, Action, ActionSpace, BomberMove, Environment};
use crate::error::{MagnetError, Result};
use crate::nn::{Activation, Mlp};

use super::magnet::episode_seed;
use super::{bellman_targets, critic_loss, EpisodeMetrics, EvalSummary, MetricsLog, ReplayBuffer, TrainConfig, Trainer};

/// A multi-agent task with discrete actions and per-agent feature vectors.
pub trait DqnTask {
    fn num_agents(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn feature_width(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<()>;
    fn features(&self, agent: usize) -> Vec<f64>;
    /// Whether the agent still acts (dead agents are skipped).
    fn is_active(&self, agent: usize) -> bool;
    /// Returns per-agent rewards and the done flag.
    fn step(&mut self, actions: &[usize]) -> Result<(Vec<f64>, bool)>;
    fn won(&self) -> bool;
}

/// Deterministic two-step chain: from `s0`, action 1 ends the episode with
/// reward 0.5 and action 0 moves to `s1` with reward 0; from `s1`, action 1
/// pays 1 and action 0 pays 0, both terminal.
#[derive(Clone, Debug, Default)]
pub struct ChainMdp {
    state: usize,
    done: bool,
    total: f64,
}

impl ChainMdp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Optimal action values by value iteration, `q[s][a]`.
    pub fn optimal_q(gamma: f64) -> [[f64; 2]; 2] {
        let mut q = [[0.0f64; 2]; 2];
        for _ in 0..100 {
            let v1 = q[1][0].max(q[1][1]);
            q = [[gamma * v1, 0.5], [0.0, 1.0]];
        }
        q
    }

    pub fn one_hot(state: usize) -> Vec<f64> {
        let mut f = vec![0.0; 2];
        f[state] = 1.0;
        f
    }
}

impl DqnTask for ChainMdp {
    fn num_agents(&self) -> usize {
        1
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn feature_width(&self) -> usize {
        2
    }

    fn reset(&mut self, _seed: u64) -> Result<()> {
        *self = Self::default();
        Ok(())
    }

    fn features(&self, _agent: usize) -> Vec<f64> {
        Self::one_hot(self.state)
    }

    fn is_active(&self, _agent: usize) -> bool {
        !self.done
    }

    fn step(&mut self, actions: &[usize]) -> Result<(Vec<f64>, bool)> {
        if self.done {
            return Err(MagnetError::Contract("step after the chain ended".into()));
        }
        let r = match (self.state, actions[0]) {
            (0, 0) => {
                self.state = 1;
                0.0
            }
            (0, _) => {
                self.done = true;
                0.5
            }
            (_, 0) => {
                self.done = true;
                0.0
            }
            _ => {
                self.done = true;
                1.0
            }
        };
        self.total += r;
        Ok((vec![r], self.done))
    }

    fn won(&self) -> bool {
        self.total >= 1.0
    }
}

/// A grid game seen by independent DQN learners: each learner observes its
/// flat local observation and picks from the discretised action set
/// (20 heading/speed pairs, or the six bomber moves). Other agents follow
/// the scripted policy.
pub struct GridDqnTask {
    env: Box<dyn Environment>,
    learners: Vec<usize>,
    scripted: RngStream,
}

impl GridDqnTask {
    pub fn new(env: Box<dyn Environment>) -> Self {
        let learners = env.learners();
        Self {
            env,
            learners,
            scripted: RngStream::new(0, "scripted"),
        }
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn action(&self, index: usize) -> Result<Action> {
        match self.env.action_space() {
            ActionSpace::Continuous => Ok(Action::discretized(index)),
            ActionSpace::Discrete => Ok(Action::Discrete(BomberMove::from_index(index)?)),
        }
    }
}

impl DqnTask for GridDqnTask {
    fn num_agents(&self) -> usize {
        self.learners.len()
    }

    fn num_actions(&self) -> usize {
        match self.env.action_space() {
            ActionSpace::Continuous => Action::DISCRETIZED_COUNT,
            ActionSpace::Discrete => 6,
        }
    }

    fn feature_width(&self) -> usize {
        self.env.local_obs_width()
    }

    fn reset(&mut self, seed: u64) -> Result<()> {
        self.env.reset(seed)?;
        self.scripted = RngStream::new(seed, "scripted");
        Ok(())
    }

    fn features(&self, agent: usize) -> Vec<f64> {
        let a = self.learners[agent];
        if !self.env.is_alive(a) {
            return vec![0.0; self.feature_width()];
        }
        self.env
            .observe_local(self.env.agent_vertex(a))
            .map(|o| o.flat())
            .unwrap_or_else(|_| vec![0.0; self.feature_width()])
    }

    fn is_active(&self, agent: usize) -> bool {
        self.env.is_alive(self.learners[agent])
    }

    fn step(&mut self, actions: &[usize]) -> Result<(Vec<f64>, bool)> {
        let mut joint = self.env.scripted_joint_action(&mut self.scripted);
        for (i, a) in self.learners.clone().into_iter().enumerate() {
            joint[a] = if self.env.is_alive(a) {
                self.action(actions[i])?
            } else {
                Action::noop(self.env.action_space())
            };
        }
        let out = self.env.step(&joint)?;
        Ok((self.learners.iter().map(|a| out.rewards[*a]).collect(), out.done))
    }

    fn won(&self) -> bool {
        self.env.winner() == Some(self.env.team_of(self.learners[0]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqnTransition {
    pub features: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_features: Vec<f64>,
    pub done: bool,
}

/// A Q-network with a target copy.
#[derive(Clone, Debug)]
pub struct Dqn {
    pub store: ParamStore,
    pub target: ParamStore,
    net: Mlp,
    opt: Optimizer,
    actions: usize,
}

impl Dqn {
    pub fn new(name: &str, width: usize, hidden: &[usize], actions: usize, lr: f64, rng: &mut RngStream) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut sizes = vec![width];
        sizes.extend(hidden);
        sizes.push(actions);
        let net = Mlp::new(&mut store, name, &sizes, 0.0, Activation::Linear, rng)?;
        Ok(Self {
            target: store.clone(),
            store,
            net,
            opt: Optimizer::adam(lr),
            actions,
        })
    }

    fn values(&self, store: &ParamStore, features: &[Vec<f64>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(
            features.len(),
            self.net.input_width(),
            features.concat(),
        )?);
        let q = self.net.eval(&mut tape, store, x)?;
        Ok(tape.value(q).clone())
    }

    pub fn q_values(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.values(&self.store, &[features.to_vec()])?.into_data())
    }

    pub fn greedy(&self, features: &[f64]) -> Result<usize> {
        let q = self.q_values(features)?;
        Ok(argmax(&q))
    }

    /// One TD step on `y = r + γ max_a' Q_target(s', a')`.
    pub fn update(&mut self, batch: &[&DqnTransition], gamma: f64, tau: f64, grad_clip: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(MagnetError::Input("empty batch".into()));
        }
        let next: Vec<Vec<f64>> = batch.iter().map(|t| t.next_features.clone()).collect();
        let next_q = self.values(&self.target, &next)?;
        let best: Vec<f64> = next_q
            .data()
            .chunks(self.actions)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let done: Vec<bool> = batch.iter().map(|t| t.done).collect();
        let targets = bellman_targets(&rewards, &best, &done, gamma)?;

        let mut tape = Tape::new();
        let feats: Vec<f64> = batch.iter().flat_map(|t| t.features.iter().copied()).collect();
        let x = tape.constant(Tensor::matrix(batch.len(), self.net.input_width(), feats)?);
        let q = self.net.eval(&mut tape, &self.store, x)?;
        let idx: Vec<usize> = batch
            .iter()
            .enumerate()
            .map(|(b, t)| b * self.actions + t.action)
            .collect();
        let chosen = tape.gather(q, Rc::new(idx), vec![batch.len(), 1])?;
        let loss = critic_loss(&mut tape, chosen, &targets)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        self.store.zero_grad();
        tape.accumulate_param_grads(&mut self.store);
        if grad_clip > 0.0 {
            self.store.clip_grad_norm(grad_clip);
        }
        self.opt.step(&mut self.store)?;
        self.target.soft_update_from(&self.store, tau)?;
        Ok(value)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Parameter digests of the non-training agents at the start and end of a
/// round-robin phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRecord {
    pub agent: usize,
    pub episodes: usize,
    pub frozen_before: Vec<String>,
    pub frozen_after: Vec<String>,
}

#[derive(Debug)]
pub struct MadqnReport {
    pub log: MetricsLog,
    pub nets: Vec<Dqn>,
    pub phases: Vec<PhaseRecord>,
}

/// Per-agent networks, buffers and counters shared by the round-robin loop.
#[derive(Debug)]
struct MadqnCore {
    nets: Vec<Dqn>,
    buffer: ReplayBuffer<DqnTransition>,
    explore: RngStream,
    sampler: RngStream,
    steps: u64,
}

#[derive(Debug, Default)]
struct DqnEpisode {
    ret: f64,
    steps: u64,
    win: bool,
    losses: Vec<f64>,
}

impl MadqnCore {
    fn new(task: &dyn DqnTask, tc: &TrainConfig, hidden: &[usize], seed: u64) -> Result<Self> {
        let init = RngStream::new(seed, "madqn/init");
        let nets = (0..task.num_agents())
            .map(|i| {
                Dqn::new(
                    &format!("q{i}"),
                    task.feature_width(),
                    hidden,
                    task.num_actions(),
                    tc.critic_lr,
                    &mut init.derive(&i.to_string()),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            nets,
            buffer: ReplayBuffer::new(tc.replay_capacity),
            explore: RngStream::new(seed, "madqn/explore"),
            sampler: RngStream::new(seed, "madqn/sampler"),
            steps: 0,
        })
    }

    /// One episode; only `learner` (if any) explores and is updated.
    fn episode(&mut self, task: &mut dyn DqnTask, env_seed: u64, learner: Option<usize>, tc: &TrainConfig) -> Result<DqnEpisode> {
        task.reset(env_seed)?;
        let n = task.num_agents();
        let mut out = DqnEpisode::default();
        loop {
            let feats: Vec<Vec<f64>> = (0..n).map(|i| task.features(i)).collect();
            let mut actions = Vec::with_capacity(n);
            for (i, f) in feats.iter().enumerate() {
                let a = if Some(i) == learner && self.explore.bernoulli(tc.madqn_epsilon) {
                    self.explore.below(task.num_actions())
                } else {
                    self.nets[i].greedy(f)?
                };
                actions.push(a);
            }
            let active: Vec<bool> = (0..n).map(|i| task.is_active(i)).collect();
            let (rewards, done) = task.step(&actions)?;
            out.ret += rewards.iter().sum::<f64>() / n as f64;
            out.steps += 1;
            if let Some(k) = learner {
                if active[k] {
                    self.buffer.push(DqnTransition {
                        features: feats[k].clone(),
                        action: actions[k],
                        reward: rewards[k],
                        next_features: task.features(k),
                        done: done || !task.is_active(k),
                    });
                }
                self.steps += 1;
                let ready = self.buffer.len() >= tc.warmup.max(tc.batch_size);
                if ready && self.steps % tc.train_every as u64 == 0 {
                    let batch = self.buffer.sample(tc.batch_size, &mut self.sampler)?;
                    match self.nets[k].update(&batch, tc.gamma, tc.tau, tc.grad_clip) {
                        Ok(l) => out.losses.push(l),
                        Err(MagnetError::Numeric { name, detail }) => log::warn!("DQN update skipped: {name}: {detail}"),
                        Err(e) => return Err(e),
                    }
                }
            }
            if done {
                break;
            }
        }
        out.win = task.won();
        Ok(out)
    }

    fn digests_except(&self, agent: usize) -> Vec<String> {
        self.nets
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != agent)
            .map(|(_, n)| n.store.digest())
            .collect()
    }
}

fn phase_plan(episodes: usize, agents: usize, cycles: usize) -> usize {
    (episodes / (agents * cycles.max(1)).max(1)).max(1)
}

fn metrics(episode: usize, seed: u64, e: &DqnEpisode) -> EpisodeMetrics {
    EpisodeMetrics {
        episode,
        seed,
        win: e.win as u8,
        ret: e.ret,
        steps: e.steps,
        loss_critic: if e.losses.is_empty() {
            0.0
        } else {
            e.losses.iter().sum::<f64>() / e.losses.len() as f64
        },
        loss_actor: 0.0,
        loss_graph: 0.0,
    }
}

/// Iterative MADQN: agents train one at a time (ε-greedy DQN) while the
/// others act greedily from frozen networks; `madqn_cycles` passes over
/// all agents share `episodes` training episodes. With one agent this is
/// plain DQN.
pub fn madqn_train(task: &mut dyn DqnTask, tc: &TrainConfig, hidden: &[usize], seed: u64) -> Result<MadqnReport> {
    let mut core = MadqnCore::new(task, tc, hidden, seed)?;
    let n = task.num_agents();
    let per_phase = phase_plan(tc.episodes, n, tc.madqn_cycles);
    let mut log = MetricsLog::new(seed);
    let mut phases = Vec::new();
    let mut episode = 0;
    for _ in 0..tc.madqn_cycles.max(1) {
        for k in 0..n {
            core.buffer = ReplayBuffer::new(tc.replay_capacity);
            let before = core.digests_except(k);
            for _ in 0..per_phase {
                let e = core.episode(task, episode_seed(seed, 1, episode as u64), Some(k), tc)?;
                log.push(metrics(episode, seed, &e));
                episode += 1;
            }
            phases.push(PhaseRecord {
                agent: k,
                episodes: per_phase,
                frozen_before: before,
                frozen_after: core.digests_except(k),
            });
        }
    }
    Ok(MadqnReport {
        log,
        nets: core.nets,
        phases,
    })
}

/// MADQN on a grid game behind the [`Trainer`] interface.
pub struct MadqnTrainer {
    task: GridDqnTask,
    core: MadqnCore,
    tc: TrainConfig,
    seed: u64,
    per_phase: usize,
    current: Option<usize>,
}

impl MadqnTrainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut env = make_env(&cfg.env)?;
        env.reset(episode_seed(seed, 0, 0))?;
        let task = GridDqnTask::new(env);
        let core = MadqnCore::new(&task, &cfg.training, &cfg.model.critic_hidden, seed)?;
        let per_phase = phase_plan(cfg.training.episodes, task.num_agents(), cfg.training.madqn_cycles);
        Ok(Self {
            task,
            core,
            tc: cfg.training.clone(),
            seed,
            per_phase,
            current: None,
        })
    }
}

impl MadqnTrainer {
    fn combined(&self) -> ParamStore {
        let mut all = ParamStore::new();
        for net in &self.core.nets {
            for (_, p) in net.store.iter() {
                all.add(p.name.clone(), p.value.clone());
            }
        }
        all
    }
}

impl Trainer for MadqnTrainer {
    fn name(&self) -> &'static str {
        "madqn"
    }

    fn pretrain(&mut self, _episodes: usize) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn train_episode(&mut self, episode: usize) -> Result<EpisodeMetrics> {
        let k = (episode / self.per_phase) % self.task.num_agents();
        if self.current != Some(k) {
            self.core.buffer = ReplayBuffer::new(self.tc.replay_capacity);
            self.current = Some(k);
        }
        let e = self
            .core
            .episode(&mut self.task, episode_seed(self.seed, 1, episode as u64), Some(k), &self.tc)?;
        Ok(metrics(episode, self.seed, &e))
    }

    fn evaluate(&mut self, episodes: usize, seed: u64) -> Result<EvalSummary> {
        let (mut wins, mut ret, mut steps) = (0, 0.0, 0.0);
        for e in 0..episodes as u64 {
            let out = self.core.episode(&mut self.task, episode_seed(seed, 3, e), None, &self.tc)?;
            wins += out.win as usize;
            ret += out.ret;
            steps += out.steps as f64;
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
        crate::autodiff::to_checkpoint_string(&self.combined())
    }

    fn load_checkpoint(&mut self, text: &str) -> Result<()> {
        let mut all = self.combined();
        crate::autodiff::load_checkpoint_str(&mut all, text)?;
        for net in &mut self.core.nets {
            for id in net.store.ids().collect::<Vec<_>>() {
                let src = all.lookup(&net.store.get(id).name).expect("combined store has every name");
                net.store.get_mut(id).value = all.value(src).clone();
            }
            net.target.copy_values_from(&net.store)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_optimum() {
        let q = ChainMdp::optimal_q(0.9);
        assert!((q[0][0] - 0.9).abs() < 1e-12);
        assert_eq!(q[0][1], 0.5);
        assert_eq!(q[1], [0.0, 1.0]);
    }

    #[test]
    fn chain_dynamics() {
        let mut c = ChainMdp::new();
        assert_eq!(c.step(&[0]).unwrap(), (vec![0.0], false));
        assert_eq!(c.step(&[1]).unwrap(), (vec![1.0], true));
        assert!(c.won());
        assert!(c.step(&[0]).is_err());
    }
}
