//! Predator-prey pursuit on a walled grid.
//!
//! Predators wound every prey within `attack_range` (Chebyshev) by one health
//! point per tick; a prey at 0 health dies. The predator team wins once all
//! prey are dead, the prey win if any survives `episode_limit` ticks.

use crate::autodiff::RngStream;
use crate::error::{MagnetError, Result};

use super::{
    bfs_distances, crop_local, offset, pp_channels as ch, Action, ActionSpace, EnvConfig,
    Environment, Event, EventKind, LocalObs, Pos, StateTensor, StepOutcome, Vertex, VertexId,
    VertexKind, EIGHT_DIRS,
};

/// Team id of the learning predators.
pub const LEARNER_TEAM: usize = 0;
/// Team id of the optional scripted rival predators.
pub const RIVAL_TEAM: usize = 1;
/// Team id of the prey.
pub const PREY_TEAM: usize = 2;

const GENERATION_RETRIES: usize = 200;
/// A velocity component at least this large moves one cell along its axis.
const MOVE_THRESHOLD: f64 = 0.38;

#[derive(Clone, Debug, PartialEq)]
pub struct PpAgent {
    pub pos: Pos,
    pub team: usize,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prey {
    pub pos: Pos,
    pub health: u32,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpState {
    pub tick: u64,
    pub size: usize,
    /// Interior obstacles in map scan order.
    pub obstacles: Vec<Pos>,
    pub predators: Vec<PpAgent>,
    pub prey: Vec<Prey>,
    pub done: bool,
    pub winner: Option<usize>,
    pub grid: StateTensor,
    pub rng: RngStream,
}

#[derive(Clone, Debug)]
pub struct PredatorPrey {
    cfg: EnvConfig,
    state: PpState,
}

fn chebyshev(a: Pos, b: Pos) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

fn euclid(a: Pos, b: Pos) -> f64 {
    let di = a.0 as f64 - b.0 as f64;
    let dj = a.1 as f64 - b.1 as f64;
    (di * di + dj * dj).sqrt()
}

fn quantize(u: f64) -> isize {
    if u >= MOVE_THRESHOLD {
        1
    } else if u <= -MOVE_THRESHOLD {
        -1
    } else {
        0
    }
}

/// Grid displacement `(d_row, d_col)` produced by a continuous action.
pub fn continuous_delta(action: &Action) -> (isize, isize) {
    match action.velocity() {
        Some((vc, vr)) => (quantize(vr), quantize(vc)),
        None => (0, 0),
    }
}

fn toward(delta: (isize, isize)) -> Action {
    if delta == (0, 0) {
        return Action::Continuous {
            direction: 0.0,
            speed: 0.0,
        };
    }
    Action::from_velocity(delta.1 as f64, delta.0 as f64)
}

impl PredatorPrey {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let total = cfg.predators + cfg.rival_predators;
        if total == 0 || total > ch::MAX_PREDATORS {
            return Err(MagnetError::config(
                "env.predators",
                format!("between 1 and {} predators in total", ch::MAX_PREDATORS),
            ));
        }
        if cfg.channels < ch::FIRST_RESERVED {
            return Err(MagnetError::config(
                "env.channels",
                format!("predator-prey needs at least {} channels", ch::FIRST_RESERVED),
            ));
        }
        if cfg.obstacles % 2 == 1 {
            return Err(MagnetError::config(
                "env.obstacles",
                "obstacles are placed in mirrored pairs; use an even count",
            ));
        }
        if cfg.prey == 0 {
            return Err(MagnetError::config("env.prey", "at least one prey"));
        }
        let mut env = Self {
            state: PpState {
                tick: 0,
                size: cfg.size,
                obstacles: Vec::new(),
                predators: Vec::new(),
                prey: Vec::new(),
                done: false,
                winner: None,
                grid: StateTensor::new(cfg.size, cfg.channels),
                rng: RngStream::new(0, "predator-prey"),
            },
            cfg,
        };
        env.reset(0)?;
        Ok(env)
    }

    /// Builds an environment on a hand-made map. Positions are `(row, col)`
    /// inside the border ring.
    pub fn crafted(cfg: EnvConfig, obstacles: Vec<Pos>, predators: Vec<Pos>, prey: Vec<Pos>) -> Result<Self> {
        let mut cfg = cfg;
        cfg.obstacles = obstacles.len();
        cfg.predators = predators.len().min(cfg.predators.max(1));
        cfg.rival_predators = predators.len() - cfg.predators;
        cfg.prey = prey.len();
        let mut env = Self::new(EnvConfig {
            obstacles: 0,
            ..cfg.clone()
        })?;
        env.cfg = cfg;
        let mut obstacles = obstacles;
        obstacles.sort();
        let learners = env.cfg.predators;
        let state = &mut env.state;
        state.obstacles = obstacles;
        state.predators = predators
            .into_iter()
            .enumerate()
            .map(|(i, pos)| PpAgent {
                pos,
                team: if i < learners { LEARNER_TEAM } else { RIVAL_TEAM },
                alive: true,
            })
            .collect();
        state.prey = prey
            .into_iter()
            .map(|pos| Prey {
                pos,
                health: env.cfg.prey_health,
                alive: true,
            })
            .collect();
        state.tick = 0;
        state.done = false;
        state.winner = None;
        env.state.grid = env.observe_global();
        env.check_layout()?;
        Ok(env)
    }

    pub fn state(&self) -> &PpState {
        &self.state
    }

    /// Static reset: `(state, tensor)` for a config and seed.
    pub fn reset_state(cfg: &EnvConfig, seed: u64) -> Result<(PpState, StateTensor)> {
        let mut env = Self::new(cfg.clone())?;
        let t = env.reset(seed)?;
        Ok((env.state, t))
    }

    fn check_layout(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let all = self
            .state
            .predators
            .iter()
            .map(|p| p.pos)
            .chain(self.state.prey.iter().map(|p| p.pos))
            .chain(self.state.obstacles.iter().copied());
        for p in all {
            if self.is_border(p) || !seen.insert(p) {
                return Err(MagnetError::Input(format!("invalid or overlapping position {p:?}")));
            }
        }
        Ok(())
    }

    fn is_border(&self, (i, j): Pos) -> bool {
        let d = self.cfg.size;
        i == 0 || j == 0 || i + 1 >= d || j + 1 >= d
    }

    fn is_wall(&self, p: Pos) -> bool {
        self.is_border(p) || self.state.obstacles.contains(&p)
    }

    fn occupied(&self, p: Pos) -> bool {
        self.state.predators.iter().any(|a| a.alive && a.pos == p)
            || self.state.prey.iter().any(|y| y.alive && y.pos == p)
    }

    fn generate(&mut self, seed: u64) -> Result<()> {
        let d = self.cfg.size;
        let mut rng = RngStream::new(seed, "predator-prey/map");
        for _ in 0..GENERATION_RETRIES {
            let mut obstacles: Vec<Pos> = Vec::new();
            let mut guard = 0;
            while obstacles.len() < self.cfg.obstacles && guard < 10_000 {
                guard += 1;
                let p = (1 + rng.below(d - 2), 1 + rng.below(d - 2));
                let mirror = (d - 1 - p.0, d - 1 - p.1);
                if p == mirror || obstacles.contains(&p) || obstacles.contains(&mirror) {
                    continue;
                }
                obstacles.push(p);
                obstacles.push(mirror);
            }
            if obstacles.len() != self.cfg.obstacles {
                continue;
            }
            obstacles.sort();
            self.state.obstacles = obstacles;
            if !self.free_cells_connected() {
                continue;
            }
            if self.place_agents(&mut rng) {
                return Ok(());
            }
        }
        Err(MagnetError::Generation(format!(
            "no valid predator-prey map after {GENERATION_RETRIES} attempts"
        )))
    }

    fn free_cells(&self) -> Vec<Pos> {
        let d = self.cfg.size;
        (1..d - 1)
            .flat_map(|i| (1..d - 1).map(move |j| (i, j)))
            .filter(|p| !self.state.obstacles.contains(p))
            .collect()
    }

    fn free_cells_connected(&self) -> bool {
        let free = self.free_cells();
        let Some(&start) = free.first() else { return false };
        let dist = bfs_distances(self.cfg.size, start, &EIGHT_DIRS, |p| !self.is_wall(p));
        free.iter().all(|p| dist[p.0 * self.cfg.size + p.1].is_some())
    }

    fn place_agents(&mut self, rng: &mut RngStream) -> bool {
        let free = self.free_cells();
        let needed = self.cfg.predators + self.cfg.rival_predators + self.cfg.prey;
        if free.len() < needed {
            return false;
        }
        for _ in 0..100 {
            let mut cells = free.clone();
            rng.shuffle(&mut cells);
            let n_pred = self.cfg.predators + self.cfg.rival_predators;
            let preds: Vec<Pos> = cells[..n_pred].to_vec();
            let prey: Vec<Pos> = cells[n_pred..]
                .iter()
                .copied()
                .filter(|p| preds.iter().all(|q| chebyshev(*p, *q) > self.cfg.attack_range + 1))
                .take(self.cfg.prey)
                .collect();
            if prey.len() < self.cfg.prey {
                continue;
            }
            self.state.predators = preds
                .into_iter()
                .enumerate()
                .map(|(i, pos)| PpAgent {
                    pos,
                    team: if i < self.cfg.predators { LEARNER_TEAM } else { RIVAL_TEAM },
                    alive: true,
                })
                .collect();
            self.state.prey = prey
                .into_iter()
                .map(|pos| Prey {
                    pos,
                    health: self.cfg.prey_health,
                    alive: true,
                })
                .collect();
            return true;
        }
        false
    }

    fn validate_actions(&self, actions: &[Action]) -> Result<()> {
        if actions.len() != self.num_agents() {
            return Err(MagnetError::Input(format!(
                "expected {} actions, got {}",
                self.num_agents(),
                actions.len()
            )));
        }
        for (i, a) in actions.iter().enumerate() {
            match *a {
                Action::Continuous { direction, speed } => {
                    if !direction.is_finite() || !speed.is_finite() || !(0.0..=1.0).contains(&speed) {
                        return Err(MagnetError::Input(format!(
                            "agent {i}: malformed continuous action ({direction}, {speed})"
                        )));
                    }
                }
                Action::Discrete(_) => {
                    return Err(MagnetError::Input(format!(
                        "agent {i}: predator-prey expects continuous actions"
                    )))
                }
            }
        }
        Ok(())
    }

    fn try_move(&mut self, agent: usize, delta: (isize, isize)) {
        if delta == (0, 0) {
            return;
        }
        let n_pred = self.state.predators.len();
        let from = if agent < n_pred {
            self.state.predators[agent].pos
        } else {
            self.state.prey[agent - n_pred].pos
        };
        let Some(to) = offset(from, delta, self.cfg.size) else { return };
        if self.is_wall(to) || self.occupied(to) {
            return;
        }
        let channel = if agent < n_pred { ch::PREDATOR_BASE + agent } else { ch::PREY };
        self.state.grid.clear(from, channel);
        self.state.grid.set(to, channel);
        if agent < n_pred {
            self.state.predators[agent].pos = to;
        } else {
            self.state.prey[agent - n_pred].pos = to;
        }
    }

    /// Events implied by two consecutive states.
    pub fn extract_events(pre: &PpState, _actions: &[Action], post: &PpState, attack_range: usize) -> Vec<Event> {
        let mut events = Vec::new();
        for (y, (before, after)) in pre.prey.iter().zip(&post.prey).enumerate() {
            if !before.alive || after.health >= before.health {
                continue;
            }
            let kind = if after.alive {
                EventKind::WoundPrey
            } else {
                EventKind::KillPrey
            };
            for (i, p) in post.predators.iter().enumerate() {
                if p.alive && chebyshev(p.pos, after.pos) <= attack_range {
                    events.push(Event::new(kind, VertexId::Agent(i), VertexId::Prey(y)));
                }
            }
        }
        events
    }
}

impl Environment for PredatorPrey {
    fn name(&self) -> &'static str {
        "predator-prey"
    }

    fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous
    }

    fn num_agents(&self) -> usize {
        self.state.predators.len() + self.state.prey.len()
    }

    fn team_of(&self, agent: usize) -> usize {
        self.state
            .predators
            .get(agent)
            .map(|p| p.team)
            .unwrap_or(PREY_TEAM)
    }

    fn learners(&self) -> Vec<usize> {
        (0..self.cfg.predators).collect()
    }

    fn agent_vertex(&self, agent: usize) -> VertexId {
        let n = self.state.predators.len();
        if agent < n {
            VertexId::Agent(agent)
        } else {
            VertexId::Prey(agent - n)
        }
    }

    fn is_alive(&self, agent: usize) -> bool {
        let n = self.state.predators.len();
        if agent < n {
            self.state.predators[agent].alive
        } else {
            self.state.prey.get(agent - n).is_some_and(|p| p.alive)
        }
    }

    fn tick(&self) -> u64 {
        self.state.tick
    }

    fn is_done(&self) -> bool {
        self.state.done
    }

    fn winner(&self) -> Option<usize> {
        self.state.winner
    }

    fn reset(&mut self, seed: u64) -> Result<StateTensor> {
        self.state.tick = 0;
        self.state.done = false;
        self.state.winner = None;
        self.state.rng = RngStream::new(seed, "predator-prey/env");
        self.generate(seed)?;
        self.state.grid = self.observe_global();
        Ok(self.state.grid.clone())
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        if self.state.done {
            return Err(MagnetError::Contract("step called on a finished episode".into()));
        }
        self.validate_actions(actions)?;
        let pre = self.state.clone();
        let mut warnings = Vec::new();
        self.state.tick += 1;
        let n_pred = self.state.predators.len();
        for (agent, action) in actions.iter().enumerate() {
            if !self.is_alive(agent) {
                if continuous_delta(action) != (0, 0) {
                    warnings.push(format!("ignored action for dead agent {agent}"));
                }
                continue;
            }
            let delta = continuous_delta(action);
            let repeats = if agent < n_pred { 1 } else { self.cfg.prey_speed.max(1) };
            for _ in 0..repeats {
                self.try_move(agent, delta);
            }
        }

        let mut last_killer_team = None;
        for y in 0..self.state.prey.len() {
            let prey = &self.state.prey[y];
            if !prey.alive {
                continue;
            }
            let attacker = self
                .state
                .predators
                .iter()
                .find(|p| p.alive && chebyshev(p.pos, prey.pos) <= self.cfg.attack_range)
                .map(|p| p.team);
            if let Some(team) = attacker {
                let prey = &mut self.state.prey[y];
                prey.health = prey.health.saturating_sub(1);
                if prey.health == 0 {
                    prey.alive = false;
                    let pos = prey.pos;
                    self.state.grid.clear(pos, ch::PREY);
                    last_killer_team = Some(team);
                }
            }
        }
        let events = Self::extract_events(&pre, actions, &self.state, self.cfg.attack_range);

        let mut rewards = vec![0.0; self.num_agents()];
        if self.cfg.shaping {
            for e in &events {
                if let VertexId::Agent(i) = e.source {
                    rewards[i] += e.weight / self.cfg.event_scale;
                }
            }
        }
        if self.state.prey.iter().all(|p| !p.alive) {
            self.state.done = true;
            self.state.winner = last_killer_team;
        } else if self.state.tick >= self.cfg.episode_limit {
            self.state.done = true;
            self.state.winner = Some(PREY_TEAM);
        }
        if self.state.done {
            for (agent, r) in rewards.iter_mut().enumerate() {
                *r += match self.state.winner {
                    Some(w) if w == self.team_of(agent) => 1.0,
                    Some(_) => -1.0,
                    None => 0.0,
                };
            }
        }
        Ok(StepOutcome {
            observation: self.state.grid.clone(),
            rewards,
            events,
            done: self.state.done,
            winner: self.state.winner,
            warnings,
        })
    }

    fn observe_global(&self) -> StateTensor {
        let d = self.cfg.size;
        let mut g = StateTensor::new(d, self.cfg.channels);
        for i in 0..d {
            for j in 0..d {
                if self.is_wall((i, j)) {
                    g.set((i, j), ch::WALL);
                }
            }
        }
        for (i, p) in self.state.predators.iter().enumerate() {
            if p.alive {
                g.set(p.pos, ch::PREDATOR_BASE + i);
            }
        }
        for y in &self.state.prey {
            if y.alive {
                g.set(y.pos, ch::PREY);
            }
        }
        g
    }

    fn grid(&self) -> &StateTensor {
        &self.state.grid
    }

    fn observe_local(&self, vertex: VertexId) -> Result<LocalObs> {
        let v = self
            .vertices()
            .into_iter()
            .find(|v| v.id == vertex)
            .ok_or_else(|| MagnetError::Lookup(format!("vertex {vertex:?} is not present")))?;
        let scale = (self.cfg.size - 1) as f64;
        Ok(LocalObs {
            crop: crop_local(&self.state.grid, v.pos, self.cfg.view),
            scalars: [v.scalar, v.pos.0 as f64 / scale, v.pos.1 as f64 / scale],
        })
    }

    fn vertices(&self) -> Vec<Vertex> {
        let mut out = Vec::new();
        for (i, p) in self.state.predators.iter().enumerate() {
            if p.alive {
                out.push(Vertex {
                    id: VertexId::Agent(i),
                    kind: VertexKind::Agent { team: p.team },
                    pos: p.pos,
                    scalar: 0.0,
                });
            }
        }
        for (y, p) in self.state.prey.iter().enumerate() {
            if p.alive {
                out.push(Vertex {
                    id: VertexId::Prey(y),
                    kind: VertexKind::Prey,
                    pos: p.pos,
                    scalar: p.health as f64 / 10.0,
                });
            }
        }
        for (w, pos) in self.state.obstacles.iter().enumerate() {
            out.push(Vertex {
                id: VertexId::Wall(w),
                kind: VertexKind::Wall,
                pos: *pos,
                scalar: 0.0,
            });
        }
        out
    }

    fn object_capacity(&self) -> usize {
        self.cfg.rival_predators + self.cfg.prey + self.cfg.obstacles
    }

    fn column_of(&self, vertex: VertexId) -> Option<usize> {
        let n_pred = self.cfg.predators + self.cfg.rival_predators;
        match vertex {
            VertexId::Agent(i) if i < n_pred => Some(i),
            VertexId::Prey(y) if y < self.cfg.prey => Some(n_pred + y),
            VertexId::Wall(w) if w < self.cfg.obstacles => Some(n_pred + self.cfg.prey + w),
            _ => None,
        }
    }

    fn scripted_action(&self, agent: usize, _rng: &mut RngStream) -> Action {
        let n_pred = self.state.predators.len();
        let d = self.cfg.size;
        if agent < n_pred {
            let me = self.state.predators[agent].pos;
            let mut best: Option<(usize, Vec<Option<usize>>)> = None;
            for prey in self.state.prey.iter().filter(|p| p.alive) {
                let dist = bfs_distances(d, prey.pos, &EIGHT_DIRS, |p| !self.is_wall(p));
                if let Some(dm) = dist[me.0 * d + me.1] {
                    if best.as_ref().map_or(true, |(b, _)| dm < *b) {
                        best = Some((dm, dist));
                    }
                }
            }
            let Some((here, dist)) = best else {
                return toward((0, 0));
            };
            let mut choice = (0, 0);
            let mut choice_d = here;
            for delta in EIGHT_DIRS {
                if let Some(q) = offset(me, delta, d) {
                    if let Some(dq) = dist[q.0 * d + q.1] {
                        if dq < choice_d {
                            choice_d = dq;
                            choice = delta;
                        }
                    }
                }
            }
            toward(choice)
        } else {
            let me = self.state.prey[agent - n_pred].pos;
            let nearest = |p: Pos| {
                self.state
                    .predators
                    .iter()
                    .filter(|a| a.alive)
                    .map(|a| euclid(p, a.pos))
                    .fold(f64::INFINITY, f64::min)
            };
            // up, down, left, right, then stay: strict improvement needed to
            // displace an earlier candidate
            let candidates = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];
            let mut best = (f64::NEG_INFINITY, (0, 0));
            for delta in candidates {
                let target = if delta == (0, 0) {
                    Some(me)
                } else {
                    offset(me, delta, d).filter(|q| !self.is_wall(*q) && !self.occupied(*q))
                };
                if let Some(q) = target {
                    let score = nearest(q);
                    if score > best.0 {
                        best = (score, delta);
                    }
                }
            }
            toward(best.1)
        }
    }

    fn state_digest(&self) -> String {
        let mut s = self.observe_global().digest();
        for p in &self.state.prey {
            s.push_str(&format!(":{}", p.health));
        }
        s.push_str(&format!(":{}", self.state.tick));
        s
    }

    fn rng_digest(&self) -> String {
        self.state.rng.digest()
    }

    fn clone_env(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
