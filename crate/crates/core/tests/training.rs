use magnet_core::actor::{decision_registry, ActorConfig, ActorShape, DecisionInput};
use magnet_core::autodiff::{Optimizer, ParamStore, RngStream, Tape, Tensor, Var};
use magnet_core::config::{parse_config_layers, ExperimentConfig};
use magnet_core::diagnostics::{critic_tabular_check, madqn_chain_check};
use magnet_core::envs::{make_env, ActionSpace, EnvConfig, StateTensor, VertexId};
use magnet_core::error::Result;
use magnet_core::graph::{TypeSchema, TypedVertex, VertexTable};
use magnet_core::training::{
    actor_update, madqn_train, make_trainer, train, ActorSample, CriticSample, CriticStrategy, GridDqnTask,
    MagnetTrainer, ReplayBuffer, TrainConfig, Trainer,
};
use proptest::prelude::*;

/// Stand-in critic `Q(a) = −scale·‖a − a*‖²`, independent of the state.
#[derive(Debug)]
struct StubCritic {
    target: Vec<f64>,
    scale: f64,
}

impl CriticStrategy for StubCritic {
    fn name(&self) -> &'static str {
        "stub"
    }

    fn outputs(&self) -> usize {
        1
    }

    fn rewards(&self, row_rewards: &[f64]) -> Vec<f64> {
        vec![row_rewards.iter().sum()]
    }

    fn q(&self, tape: &mut Tape, _store: &ParamStore, samples: &[&CriticSample], joint: Var) -> Result<Var> {
        let b = samples.len();
        let t = tape.constant(Tensor::matrix(b, self.target.len(), self.target.repeat(b))?);
        let d = tape.sub(joint, t)?;
        let sq = tape.mul(d, d)?;
        let ones = tape.constant(Tensor::matrix(self.target.len(), 1, vec![1.0; self.target.len()])?);
        let s = tape.matmul(sq, ones)?;
        Ok(tape.scale(s, -self.scale))
    }

    fn actor_objective(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        samples: &[&CriticSample],
        live: Var,
        _recorded: &Tensor,
    ) -> Result<Var> {
        let q = self.q(tape, store, samples, live)?;
        Ok(tape.mean(q))
    }
}

fn toy_sample(rng: &mut RngStream) -> (ActorShape, ActorSample) {
    let kinds = [(VertexId::Agent(0), 0), (VertexId::Agent(1), 0), (VertexId::Prey(0), 2)];
    let columns = kinds
        .iter()
        .enumerate()
        .map(|(c, (id, t))| {
            Some(TypedVertex {
                id: *id,
                column: c,
                vertex_type: *t,
                pos: (c, 0),
                scalar: 0.0,
            })
        })
        .collect();
    let table = VertexTable {
        schema: TypeSchema::PredatorPrey,
        rows: 2,
        columns,
    };
    let mut vec = |n: usize| (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<_>>();
    let input = DecisionInput {
        table,
        observations: (0..3).map(|_| Some(vec(5))).collect(),
        features: (0..2).map(|_| Some(vec(3))).collect(),
    };
    let graph = Tensor::matrix(2, 3, vec![0.0, 0.4, -0.2, 0.3, 0.0, 0.6]).unwrap();
    let shape = ActorShape {
        schema: TypeSchema::PredatorPrey,
        rows: 2,
        cols: 3,
        obs_width: 5,
        feature_width: 3,
        action_space: ActionSpace::Continuous,
    };
    let critic = CriticSample {
        state: StateTensor::new(4, 1),
        features: input.features.iter().map(|f| f.clone().unwrap()).collect(),
    };
    let sample = ActorSample {
        input,
        graphs: vec![graph],
        critic,
        recorded: vec![0.0; 4],
    };
    (shape, sample)
}

fn joint_action(actor: &dyn magnet_core::actor::DecisionModule, store: &ParamStore, s: &ActorSample) -> Vec<f64> {
    let mut tape = Tape::new();
    let g = tape.constant(s.graphs[0].clone());
    let out = actor.forward(&mut tape, store, &s.input, g).unwrap();
    out.heads
        .into_iter()
        .flat_map(|h| tape.value(h.unwrap()).data().to_vec())
        .collect()
}

fn small_actor_cfg(decision: &str) -> ActorConfig {
    ActorConfig {
        decision: decision.into(),
        hidden: 6,
        mp_iterations: 2,
        init_hidden: vec![8],
        message_hidden: vec![6],
        choice_hidden: vec![8],
        fallback_hidden: vec![12, 6],
    }
}

#[test]
fn actor_update_climbs_a_known_critic() {
    let target = vec![0.5, -0.3, 0.2, 0.6];
    for decision in ["message-passing", "mlp"] {
        let mut rng = RngStream::new(11, "stub");
        let (shape, sample) = toy_sample(&mut rng);
        let mut store = ParamStore::new();
        let actor = decision_registry().get(decision).unwrap()(
            &mut store,
            "actor",
            &small_actor_cfg(decision),
            shape,
            &mut rng,
        )
        .unwrap();
        let critic = StubCritic {
            target: target.clone(),
            scale: 1.0,
        };
        let mut opt = Optimizer::adam(1e-3);
        let dist = |store: &ParamStore| -> f64 {
            joint_action(actor.as_ref(), store, &sample)
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let mut last = dist(&store);
        let start = last;
        for step in 0..100 {
            let obj = actor_update(actor.as_ref(), &mut store, &mut opt, &critic, &ParamStore::new(), std::slice::from_ref(&sample), 0.0)
                .unwrap();
            assert!((obj + last).abs() < 1e-9, "objective is the critic value before the step");
            let now = dist(&store);
            assert!(now < last, "{decision} step {step}: {now} !< {last}");
            last = now;
        }
        assert!(last < 0.5 * start, "{decision}: {start} -> {last}");
    }
}

#[test]
fn flat_critic_leaves_the_actor_unchanged() {
    let mut rng = RngStream::new(3, "flat");
    let (shape, sample) = toy_sample(&mut rng);
    let mut store = ParamStore::new();
    let actor = decision_registry().get("message-passing").unwrap()(
        &mut store,
        "actor",
        &small_actor_cfg("message-passing"),
        shape,
        &mut rng,
    )
    .unwrap();
    let critic = StubCritic {
        target: vec![0.0; 4],
        scale: 0.0,
    };
    let before = store.digest();
    for mut opt in [Optimizer::adam(1e-2), Optimizer::sgd(1e-1)] {
        for _ in 0..5 {
            actor_update(actor.as_ref(), &mut store, &mut opt, &critic, &ParamStore::new(), std::slice::from_ref(&sample), 1.0)
                .unwrap();
        }
    }
    assert_eq!(store.digest(), before);
    assert!(actor_update(actor.as_ref(), &mut store, &mut Optimizer::sgd(0.1), &critic, &ParamStore::new(), &[], 1.0).is_err());
}

#[test]
fn polyak_average_is_exact() {
    let mut a = ParamStore::new();
    a.add("w", Tensor::row(&[1.0, 2.0, -4.0]));
    let mut b = ParamStore::new();
    b.add("w", Tensor::row(&[3.0, 0.0, 4.0]));
    a.soft_update_from(&b, 0.25).unwrap();
    assert_eq!(a.flat_values(), [1.5, 1.5, -2.0]);
    let mut c = ParamStore::new();
    c.add("v", Tensor::row(&[0.0; 3]));
    assert!(a.soft_update_from(&c, 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_keeps_the_newest_items_in_order(cap in 1usize..20, n in 0usize..60, k in 0usize..25, seed in 0u64..1000) {
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..n {
            buf.push(i);
        }
        let kept: Vec<usize> = buf.iter().copied().collect();
        let want: Vec<usize> = (n.saturating_sub(cap)..n).collect();
        prop_assert_eq!(&kept, &want);
        prop_assert_eq!(buf.pushed(), n as u64);
        let mut rng = RngStream::new(seed, "replay");
        match buf.sample(k, &mut rng) {
            Ok(s) => {
                prop_assert!(k <= buf.len());
                let mut seen: Vec<usize> = s.into_iter().copied().collect();
                prop_assert_eq!(seen.len(), k);
                seen.sort_unstable();
                seen.dedup();
                prop_assert_eq!(seen.len(), k);
                prop_assert!(seen.iter().all(|x| want.contains(x)));
            }
            Err(_) => prop_assert!(k > buf.len() || k == 0),
        }
    }
}

/// 8×8 predator-prey, 40-step episodes, small networks.
fn tiny(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "env.size=8",
        "env.episode_limit=40",
        "env.obstacles=2",
        "model.hidden=8",
        "model.init_hidden=[8]",
        "model.message_hidden=[8]",
        "model.choice_hidden=[8]",
        "model.mp_iterations=2",
        "model.ggn_mlp_sizes=[16]",
        "model.ggn_filters=2",
        "model.critic_hidden=[16]",
        "training.warmup=16",
        "training.batch_size=8",
        "training.pretrain_episodes=2",
        "training.episodes=10",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    let cfg = parse_config_layers("", &o).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn csv_of(cfg: &ExperimentConfig, seed: u64) -> String {
    let mut t = make_trainer(cfg, seed).unwrap();
    let log = train(t.as_mut(), cfg.training.pretrain_episodes, cfg.training.episodes, seed).unwrap();
    log.to_csv_string().unwrap()
}

#[test]
fn identical_runs_write_identical_metrics() {
    let cfg = tiny(&[]);
    let a = csv_of(&cfg, 7);
    let b = csv_of(&cfg, 7);
    assert_eq!(a.lines().count(), 11, "header plus ten episodes");
    assert_eq!(a.as_bytes(), b.as_bytes());
    assert_ne!(a, csv_of(&cfg, 8), "the seed matters");
}

#[test]
fn target_networks_lag_the_online_ones() {
    let cfg = tiny(&[]);
    let mut t = MagnetTrainer::new(&cfg, 1).unwrap();
    let m = &t.model;
    assert_eq!(m.actor_target.flat_values(), m.actor_store.flat_values());
    assert_eq!(m.critic_target.flat_values(), m.critic_store.flat_values());
    let (actor0, critic0) = (m.actor_target.digest(), m.critic_target.digest());
    for e in 0..3 {
        t.train_episode(e).unwrap();
    }
    assert!(t.updates > 0);
    let m = &t.model;
    assert_ne!(m.actor_target.digest(), actor0);
    assert_ne!(m.critic_target.digest(), critic0);
    assert_ne!(m.actor_target.flat_values(), m.actor_store.flat_values());
    assert_ne!(m.critic_target.flat_values(), m.critic_store.flat_values());
}

#[test]
fn no_pretraining_leaves_every_parameter_alone() {
    let cfg = tiny(&[]);
    let mut t = MagnetTrainer::new(&cfg, 2).unwrap();
    let before = t.model.checkpoint();
    assert!(t.pretrain(0).unwrap().is_empty());
    assert_eq!(t.model.checkpoint(), before);

    // pre-training touches only the graph generator
    let (actor, critic, ggn) = (
        t.model.actor_store.digest(),
        t.model.critic_store.digest(),
        t.model.ggn_store.digest(),
    );
    t.pretrain(2).unwrap();
    assert_eq!(t.model.actor_store.digest(), actor);
    assert_eq!(t.model.critic_store.digest(), critic);
    assert_ne!(t.model.ggn_store.digest(), ggn);
}

#[test]
fn zero_lambda_freezes_the_graph_generator() {
    let cfg = tiny(&["training.lambda=0.0"]);
    let mut t = MagnetTrainer::new(&cfg, 3).unwrap();
    let ggn = t.model.ggn_store.digest();
    t.pretrain(2).unwrap();
    for e in 0..2 {
        t.train_episode(e).unwrap();
    }
    assert_eq!(t.model.ggn_store.digest(), ggn);
}

#[test]
fn heuristic_term_only_with_dsh() {
    // kills are frequent on an open 8x8 map with long episodes
    let base = ["env.obstacles=0", "env.episode_limit=100"];
    let mut with: Vec<&str> = base.to_vec();
    with.push("training.dsh=true");
    let mut on = MagnetTrainer::new(&tiny(&with), 4).unwrap();
    let trace = on.pretrain_graph(6).unwrap();
    assert!(trace.iter().any(|b| b.heuristic > 0.0), "{trace:?}");
    let mut off = MagnetTrainer::new(&tiny(&base), 4).unwrap();
    let trace = off.pretrain_graph(6).unwrap();
    assert!(trace.iter().all(|b| b.heuristic == 0.0));
    assert!(trace.iter().all(|b| b.temporal >= 0.0));
}

#[test]
fn pretraining_loss_trends_down() {
    let cfg = tiny(&[]);
    let mut t = MagnetTrainer::new(&cfg, 5).unwrap();
    // the descent phase; afterwards the loss sits on a noisy plateau
    let trace: Vec<f64> = t.pretrain_graph(30).unwrap().iter().map(|b| b.total()).collect();
    let w = 5;
    let avg: Vec<f64> = trace.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect();
    let steps = avg.len() - 1;
    let down = avg.windows(2).filter(|p| p[1] <= p[0]).count();
    assert!(down as f64 >= 0.8 * steps as f64, "{down}/{steps}: {avg:?}");
    assert!(avg.last().unwrap() < avg.first().unwrap());
}

#[test]
fn checkpoint_round_trip_reproduces_the_policy() {
    let cfg = tiny(&[]);
    let mut a = make_trainer(&cfg, 6).unwrap();
    a.pretrain(1).unwrap();
    for e in 0..2 {
        a.train_episode(e).unwrap();
    }
    let text = a.checkpoint();
    let mut b = make_trainer(&cfg, 99).unwrap();
    assert_ne!(b.checkpoint(), text);
    b.load_checkpoint(&text).unwrap();
    assert_eq!(b.checkpoint(), text);
    let ea = a.evaluate(2, 1234).unwrap();
    let eb = b.evaluate(2, 1234).unwrap();
    assert_eq!(ea, eb);
    assert!(b.load_checkpoint("not a checkpoint").is_err());
}

#[test]
fn team_critic_reaches_the_tabular_fixed_point() {
    for seed in 0..3 {
        let err = critic_tabular_check(seed, 3000).unwrap();
        assert!(err < 0.05, "seed {seed}: {err}");
    }
}

#[test]
fn single_agent_madqn_matches_the_chain_optimum() {
    for seed in 0..3 {
        let err = madqn_chain_check(seed, 2000).unwrap();
        assert!(err < 0.05, "seed {seed}: {err}");
    }
}

#[test]
fn madqn_freezes_every_agent_but_the_learner() {
    let env_cfg = EnvConfig {
        episode_limit: 20,
        obstacles: 2,
        ..EnvConfig::predator_prey(8)
    };
    let mut task = GridDqnTask::new(make_env(&env_cfg).unwrap());
    let tc = TrainConfig {
        episodes: 8,
        warmup: 8,
        batch_size: 4,
        train_every: 1,
        madqn_cycles: 2,
        ..TrainConfig::default()
    };
    let report = madqn_train(&mut task, &tc, &[8], 0).unwrap();
    assert_eq!(report.phases.len(), 2 * env_cfg.predators);
    for p in &report.phases {
        assert_eq!(p.frozen_before, p.frozen_after, "agent {} phase touched a frozen net", p.agent);
    }
    let order: Vec<usize> = report.phases.iter().map(|p| p.agent).collect();
    let want: Vec<usize> = (0..2).flat_map(|_| 0..env_cfg.predators).collect();
    assert_eq!(order, want);
    assert_eq!(report.log.rows.len(), report.phases.iter().map(|p| p.episodes).sum::<usize>());
}

#[test]
fn madqn_trainer_runs_behind_the_registry() {
    let cfg = tiny(&["training.trainer=\"madqn\"", "training.episodes=4"]);
    let mut t = make_trainer(&cfg, 0).unwrap();
    assert_eq!(t.name(), "madqn");
    let log = train(t.as_mut(), 3, 4, 0).unwrap();
    assert_eq!(log.rows.len(), 4);
    assert!(t.latest_graphs().is_empty());
}
