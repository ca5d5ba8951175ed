use std::collections::HashMap;

use magnet_core::autodiff::RngStream;
use magnet_core::envs::{
    bomber_channels, make_env, Action, BomberMove, Bomber, EnvConfig, Environment, EventKind, PredatorPrey, VertexId,
};
use proptest::prelude::*;

fn stay() -> Action {
    Action::Continuous {
        direction: 0.0,
        speed: 0.0,
    }
}

fn pp_cfg(size: usize) -> EnvConfig {
    EnvConfig {
        predators: 1,
        obstacles: 0,
        ..EnvConfig::predator_prey(size)
    }
}

fn noop() -> Action {
    Action::Discrete(BomberMove::NoOp)
}

#[test]
fn prey_dies_after_exactly_ten_steps_in_range() {
    let mut env = PredatorPrey::crafted(pp_cfg(10), vec![], vec![(4, 4)], vec![(5, 5)]).unwrap();
    for k in 1..10 {
        let out = env.step(&[stay(), stay()]).unwrap();
        assert_eq!(env.state().prey[0].health, 10 - k);
        assert!(env.state().prey[0].alive);
        assert!(!out.done);
    }
    let out = env.step(&[stay(), stay()]).unwrap();
    assert_eq!(env.state().prey[0].health, 0);
    assert!(!env.state().prey[0].alive);
    assert!(out.done);
    assert_eq!(out.winner, Some(env.team_of(0)));
    assert!(out.events.iter().any(|e| e.kind == EventKind::KillPrey && e.weight == 100.0));
}

#[test]
fn surviving_prey_wins_at_tick_limit() {
    let mut env = PredatorPrey::crafted(pp_cfg(12), vec![], vec![(1, 1)], vec![(9, 9)]).unwrap();
    assert_eq!(env.config().episode_limit, 500);
    let mut last = None;
    for t in 1..=500u64 {
        assert!(!env.is_done());
        let out = env.step(&[stay(), stay()]).unwrap();
        assert_eq!(env.tick(), t);
        last = Some(out);
    }
    let out = last.unwrap();
    assert!(out.done);
    assert_eq!(out.winner, Some(env.team_of(1)));
    assert_eq!(out.rewards[0], -1.0);
    assert_eq!(out.rewards[1], 1.0);
    assert!(env.step(&[stay(), stay()]).is_err() || env.tick() == 500);
}

fn bomb_map() -> Bomber {
    let cfg = EnvConfig {
        rigid: 0,
        wood: 0,
        item_probability: 0.0,
        ..EnvConfig::bomber(9)
    };
    // agent 0 bombs (3,3); enemy agent 1 waits four cells to the right;
    // wood one cell below (destroyed) and two cells left / up (kept)
    Bomber::crafted(cfg, vec![], vec![(4, 3), (3, 1), (1, 3)], [(3, 3), (3, 7), (8, 8), (8, 0)]).unwrap()
}

#[test]
fn bomb_explodes_ten_ticks_after_placement() {
    let mut env = bomb_map();
    let mut acts = vec![noop(); 4];
    acts[0] = Action::Discrete(BomberMove::PlaceBomb);
    env.step(&acts).unwrap();
    let placed = env.tick();
    assert_eq!(env.state().bombs.len(), 1);
    // step off both blast axes: up, then left
    acts[0] = Action::Discrete(BomberMove::Up);
    env.step(&acts).unwrap();
    acts[0] = Action::Discrete(BomberMove::Left);
    env.step(&acts).unwrap();
    acts[0] = noop();
    while env.tick() < placed + 9 {
        let out = env.step(&acts).unwrap();
        assert!(out.events.is_empty(), "nothing happens before the fuse runs out");
        assert!(env.is_alive(1));
        assert_eq!(env.state().bombs.len(), 1);
    }
    let out = env.step(&acts).unwrap();
    assert_eq!(env.tick(), placed + 10);
    assert!(env.state().bombs.is_empty());
    assert!(!env.is_alive(1), "agent four cells away on the axis dies");
    assert!(env.is_alive(0));
    let s = env.state();
    let alive = |p| s.wood.iter().zip(&s.wood_alive).any(|(w, a)| *w == p && *a);
    assert!(!alive((4, 3)), "wood at distance 1 is destroyed");
    assert!(alive((3, 1)), "wood at distance 2 survives");
    assert!(alive((1, 3)), "wood at distance 2 survives");
    let kill = out
        .events
        .iter()
        .find(|e| e.kind == EventKind::KillEnemyAgent)
        .expect("kill event");
    assert_eq!(kill.weight, 100.0);
    assert_eq!((kill.source, kill.target), (VertexId::Agent(0), VertexId::Agent(1)));
}

#[test]
fn bomb_fuse_is_the_local_scalar() {
    let mut env = bomb_map();
    let mut acts = vec![noop(); 4];
    acts[0] = Action::Discrete(BomberMove::PlaceBomb);
    env.step(&acts).unwrap();
    acts[0] = Action::Discrete(BomberMove::Up);
    env.step(&acts).unwrap();
    acts[0] = noop();
    env.step(&acts).unwrap();
    env.step(&acts).unwrap();
    let b = env.state().bombs[0].clone();
    assert_eq!(b.fuse, 7);
    let obs = env.observe_local(VertexId::Bomb(b.slot)).unwrap();
    assert!((obs.scalars[0] - 0.7).abs() < 1e-12);
    let m = env.config().channels;
    let centre = (2 * 5 + 2) * m + bomber_channels::BOMB;
    assert_eq!(obs.crop.data()[centre], 1.0);
}

#[test]
fn single_agent_is_one_hot() {
    let env = PredatorPrey::crafted(pp_cfg(8), vec![], vec![(2, 3)], vec![(6, 6)]).unwrap();
    let g = env.observe_global();
    assert_eq!(g.count_channel(0), 1);
    assert_eq!(g.get((2, 3), 0), 1);
    assert_eq!(g.channels(), 20);
}

fn random_actions(env: &dyn Environment, rng: &mut RngStream) -> Vec<Action> {
    (0..env.num_agents())
        .map(|_| match env.action_space() {
            magnet_core::envs::ActionSpace::Continuous => Action::Continuous {
                direction: rng.uniform_range(0.0, 6.28),
                speed: rng.uniform(),
            },
            magnet_core::envs::ActionSpace::Discrete => Action::Discrete(BomberMove::ALL[rng.below(6)]),
        })
        .collect()
}

/// Plays `steps` random (or scripted) joint actions and returns the
/// per-step digests.
fn rollout(cfg: &EnvConfig, seed: u64, steps: usize, scripted: bool) -> Vec<(String, Vec<u64>, usize)> {
    let mut env = make_env(cfg).unwrap();
    env.reset(seed).unwrap();
    let mut rng = RngStream::new(seed, "actions");
    let mut out = Vec::new();
    for _ in 0..steps {
        if env.is_done() {
            break;
        }
        let acts = if scripted {
            env.scripted_joint_action(&mut rng)
        } else {
            random_actions(env.as_ref(), &mut rng)
        };
        let o = env.step(&acts).unwrap();
        let r: Vec<u64> = o.rewards.iter().map(|x| x.to_bits()).collect();
        out.push((env.state_digest(), r, o.events.len()));
    }
    out
}

fn small_bomber() -> EnvConfig {
    EnvConfig {
        episode_limit: 120,
        ..EnvConfig::bomber(9)
    }
}

fn small_pp() -> EnvConfig {
    EnvConfig {
        episode_limit: 60,
        ..EnvConfig::predator_prey(10)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trajectories_are_deterministic(seed in 0u64..10_000, scripted: bool, bomber: bool) {
        let cfg = if bomber { small_bomber() } else { small_pp() };
        prop_assert_eq!(rollout(&cfg, seed, 80, scripted), rollout(&cfg, seed, 80, scripted));
    }

    #[test]
    fn bomber_conservation_and_tensor_consistency(seed in 0u64..10_000, scripted: bool) {
        let cfg = small_bomber();
        let mut env = Bomber::new(cfg.clone()).unwrap();
        env.reset(seed).unwrap();
        let rigid = env.state().rigid.clone();
        let mut rng = RngStream::new(seed, "actions");
        let mut living = 4;
        // placement tick of every bomb present after the previous step
        let mut placed_at: HashMap<(usize, (usize, usize)), u64> = HashMap::new();
        while !env.is_done() {
            let acts = if scripted { env.scripted_joint_action(&mut rng) } else { random_actions(&env, &mut rng) };
            env.step(&acts).unwrap();
            let s = env.state();
            prop_assert_eq!(&s.rigid, &rigid);
            let now = s.agents.iter().filter(|a| a.alive).count();
            prop_assert!(now <= living);
            living = now;
            prop_assert_eq!(env.grid(), &env.observe_global());
            let mut current = HashMap::new();
            for b in &s.bombs {
                prop_assert!((1..=10).contains(&b.fuse));
                let placed = placed_at.get(&(b.slot, b.pos)).copied().unwrap_or(s.tick);
                current.insert((b.slot, b.pos), placed);
                prop_assert!(s.tick < placed + 10, "bomb outlived its fuse");
                prop_assert_eq!(u64::from(b.fuse), 10 - (s.tick - placed));
            }
            placed_at = current;
            prop_assert!(s.tick <= cfg.episode_limit);
        }
    }

    #[test]
    fn predator_prey_invariants(seed in 0u64..10_000, scripted: bool) {
        let cfg = small_pp();
        let mut env = PredatorPrey::new(cfg.clone()).unwrap();
        env.reset(seed).unwrap();
        let walls = env.state().obstacles.clone();
        let mut rng = RngStream::new(seed, "actions");
        while !env.is_done() {
            let acts = if scripted { env.scripted_joint_action(&mut rng) } else { random_actions(&env, &mut rng) };
            env.step(&acts).unwrap();
            let s = env.state();
            prop_assert_eq!(&s.obstacles, &walls);
            prop_assert!(s.prey.iter().all(|p| p.health <= 10));
            prop_assert!(s.prey.iter().all(|p| p.alive == (p.health > 0)));
            prop_assert_eq!(env.grid(), &env.observe_global());
            for (i, p) in s.predators.iter().enumerate() {
                prop_assert_eq!(env.grid().get(p.pos, i), 1);
            }
            prop_assert!(s.tick <= cfg.episode_limit);
        }
        prop_assert!(env.tick() <= cfg.episode_limit);
    }
}
