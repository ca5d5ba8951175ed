//! Optimisation loops: the DDPG learner whose actor is the relevance-graph
//! decision network (with a team critic or per-agent centralised critics),
//! graph pre-training, and the iterative MADQN baseline.

mod critic;
mod madqn;
mod magnet;
mod metrics;
mod replay;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::ExperimentConfig;
use crate::envs::replay::Replay;
use crate::error::{MagnetError, Result};
use crate::graph::RelevanceGraph;
use crate::registry::Registry;

pub use critic::{
    critic_registry, maddpg_critic_inputs, state_features, AgentEntry, CriticCtor, CriticLayers, CriticSample,
    CriticShape, CriticStrategy, JointSample, PerAgentCritic, TeamCritic,
};
pub use madqn::{madqn_train, ChainMdp, Dqn, DqnTask, DqnTransition, GridDqnTask, MadqnReport, MadqnTrainer, PhaseRecord};
pub use magnet::{
    actor_update, encode_joint, episode_seed, team_heads, ActorSample, EventEdgeStats, GraphLossBreakdown, MagnetModel,
    MagnetTrainer, Transition,
};
pub use metrics::{EpisodeMetrics, EvalSummary, MetricsLog};
pub use replay::ReplayBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Registered trainer: `magnet` or `madqn`.
    pub trainer: String,
    /// Add the event terms to the graph loss (DSH).
    pub dsh: bool,
    pub pretrain_episodes: usize,
    pub episodes: usize,
    /// Weight of the graph loss next to the RL losses.
    pub lambda: f64,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub graph_lr: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Environment steps over which σ decays linearly.
    pub sigma_decay_steps: u64,
    /// Polyak factor of the target networks.
    pub tau: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    /// Environment steps between updates.
    pub train_every: usize,
    pub grad_clip: f64,
    /// MADQN: full round-robin cycles over the agents.
    pub madqn_cycles: usize,
    /// MADQN: ε-greedy exploration of the training agent.
    pub madqn_epsilon: f64,
    /// Episodes used by `eval` after training.
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trainer: "magnet".into(),
            dsh: false,
            pretrain_episodes: 2_000,
            episodes: 20_000,
            lambda: 1.0,
            gamma: 0.95,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            graph_lr: 1e-3,
            sigma_start: 0.3,
            sigma_end: 0.05,
            sigma_decay_steps: 50_000,
            tau: 0.01,
            batch_size: 16,
            replay_capacity: 100_000,
            warmup: 256,
            train_every: 4,
            grad_clip: 10.0,
            madqn_cycles: 2,
            madqn_epsilon: 0.1,
            eval_episodes: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(MagnetError::config("training.gamma", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(MagnetError::config("training.tau", "must lie in [0, 1]"));
        }
        if self.lambda < 0.0 {
            return Err(MagnetError::config("training.lambda", "must be non-negative"));
        }
        for (key, lr) in [
            ("training.actor_lr", self.actor_lr),
            ("training.critic_lr", self.critic_lr),
            ("training.graph_lr", self.graph_lr),
        ] {
            if !(lr > 0.0) {
                return Err(MagnetError::config(key, "learning rate must be positive"));
            }
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(MagnetError::config(
                "training.batch_size",
                "must be positive and no larger than the replay capacity",
            ));
        }
        if self.train_every == 0 {
            return Err(MagnetError::config("training.train_every", "must be positive"));
        }
        if self.sigma_start < 0.0 || self.sigma_end < 0.0 {
            return Err(MagnetError::config("training.sigma_start", "exploration std must be non-negative"));
        }
        Ok(())
    }

    /// Exploration σ after `step` environment steps: linear from
    /// `sigma_start` to `sigma_end`, then constant.
    pub fn sigma_at(&self, step: u64) -> f64 {
        if self.sigma_decay_steps == 0 || step >= self.sigma_decay_steps {
            return self.sigma_end;
        }
        let f = step as f64 / self.sigma_decay_steps as f64;
        self.sigma_start + (self.sigma_end - self.sigma_start) * f
    }
}

/// `y = r + γ·next` for live transitions and `y = r` for terminal ones.
pub fn bellman_targets(rewards: &[f64], next_values: &[f64], done: &[bool], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(MagnetError::Input("empty batch".into()));
    }
    if next_values.len() != rewards.len() || done.len() != rewards.len() {
        return Err(MagnetError::Dimension("batch columns have different lengths".into()));
    }
    Ok(rewards
        .iter()
        .zip(next_values)
        .zip(done)
        .map(|((r, q), d)| if *d { *r } else { r + gamma * q })
        .collect())
}

/// Mean squared TD error `mean_j (y_j − Q_j)²` for predictions `q: [B, 1]`.
pub fn critic_loss(tape: &mut Tape, q: Var, targets: &[f64]) -> Result<Var> {
    if targets.is_empty() {
        return Err(MagnetError::Input("critic loss over an empty batch".into()));
    }
    if tape.value(q).len() != targets.len() {
        return Err(MagnetError::Dimension(format!(
            "critic produced {} values for {} targets",
            tape.value(q).len(),
            targets.len()
        )));
    }
    let y = tape.constant(Tensor::new(tape.shape(q).to_vec(), targets.to_vec())?);
    let d = tape.sub(q, y)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// A training algorithm bound to one environment and seed.
pub trait Trainer {
    fn name(&self) -> &'static str;
    /// Graph pre-training with scripted agents; returns the mean loss per
    /// episode. Trainers without a graph return an empty trace.
    fn pretrain(&mut self, episodes: usize) -> Result<Vec<f64>>;
    fn train_episode(&mut self, episode: usize) -> Result<EpisodeMetrics>;
    /// Greedy evaluation against the scripted opponents.
    fn evaluate(&mut self, episodes: usize, seed: u64) -> Result<EvalSummary>;
    /// All learnable parameters in checkpoint format.
    fn checkpoint(&self) -> String;
    /// Restores parameters written by [`Trainer::checkpoint`].
    fn load_checkpoint(&mut self, text: &str) -> Result<()>;
    /// Asks for a replay log of the next episode played.
    fn record_next_episode(&mut self) {}
    /// The log requested by [`Trainer::record_next_episode`], once recorded.
    fn take_replay(&mut self) -> Option<Replay> {
        None
    }
    /// Relevance graphs at the end of the last episode (empty without a GGN).
    fn latest_graphs(&self) -> Vec<RelevanceGraph> {
        Vec::new()
    }
}

pub type TrainerCtor = fn(&ExperimentConfig, u64) -> Result<Box<dyn Trainer>>;

/// Registry of trainers keyed by name.
pub fn trainer_registry() -> Registry<TrainerCtor> {
    let mut r: Registry<TrainerCtor> = Registry::new("trainer");
    r.register("magnet", |cfg, seed| Ok(Box::new(MagnetTrainer::new(cfg, seed)?)));
    r.register("madqn", |cfg, seed| Ok(Box::new(MadqnTrainer::new(cfg, seed)?)));
    r
}

pub fn make_trainer(cfg: &ExperimentConfig, seed: u64) -> Result<Box<dyn Trainer>> {
    cfg.validate()?;
    let ctor = trainer_registry().get(&cfg.training.trainer)?;
    ctor(cfg, seed)
}

/// Pre-training followed by `episodes` training episodes.
pub fn train(trainer: &mut dyn Trainer, pretrain_episodes: usize, episodes: usize, seed: u64) -> Result<MetricsLog> {
    trainer.pretrain(pretrain_episodes)?;
    let mut log = MetricsLog::new(seed);
    for e in 0..episodes {
        log.push(trainer.train_episode(e)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bellman_target_examples() {
        let y = bellman_targets(&[1.0, 1.0], &[2.0, 2.0], &[false, true], 0.99).unwrap();
        assert!((y[0] - 2.98).abs() < 1e-12);
        assert_eq!(y[1], 1.0);
        assert!(bellman_targets(&[], &[], &[], 0.9).is_err());
    }

    #[test]
    fn perfect_critic_has_zero_loss() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap());
        let l = critic_loss(&mut tape, q, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(critic_loss(&mut tape, q, &[]).is_err());
    }

    #[test]
    fn sigma_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.sigma_at(0), 0.3);
        assert!((c.sigma_at(25_000) - 0.175).abs() < 1e-12);
        assert_eq!(c.sigma_at(50_000), 0.05);
        assert_eq!(c.sigma_at(1_000_000), 0.05);
    }

    #[test]
    fn gamma_must_be_in_open_interval() {
        for g in [0.0, 1.0, 1.5] {
            let c = TrainConfig {
                gamma: g,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
    }
}
