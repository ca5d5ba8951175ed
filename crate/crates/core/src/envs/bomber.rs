//! Two-team bomber game in the style of Pommerman's team mode.
//!
//! Agents 0 and 2 form team 0, agents 1 and 3 team 1. A bomb explodes
//! `bomb_fuse` steps after placement in a cross of length `blast_range`;
//! rays stop at rigid squares and at the first wooden square they hit,
//! and wood is only destroyed within `wood_blast_range` of the bomb.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::RngStream;
use crate::error::{MagnetError, Result};

use super::{
    bfs_distances, bomber_channels as ch, crop_local, offset, Action, ActionSpace, BomberMove,
    EnvConfig, Environment, Event, EventKind, LocalObs, Pos, StateTensor, StepOutcome, Vertex,
    VertexId, VertexKind, FOUR_DIRS,
};

const GENERATION_RETRIES: usize = 200;
const NUM_AGENTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemKind {
    ExtraBomb,
    BlastPower,
    /// Part of the type schema only; never spawned.
    Kick,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BomberAgent {
    pub pos: Pos,
    pub team: usize,
    pub alive: bool,
    /// Bombs currently available to place.
    pub ammo: usize,
    pub blast: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bomb {
    pub slot: usize,
    pub pos: Pos,
    /// Steps remaining, in `1..=10` while the bomb exists.
    pub fuse: u32,
    pub blast: usize,
    pub owner: usize,
    /// Placed during the current step; its fuse starts counting next step.
    pub fresh: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub slot: usize,
    pub pos: Pos,
    pub kind: ItemKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BomberState {
    pub tick: u64,
    pub size: usize,
    pub rigid: Vec<Pos>,
    /// Wooden squares at reset, in scan order; `wood_alive` tracks destruction.
    pub wood: Vec<Pos>,
    pub wood_alive: Vec<bool>,
    pub agents: Vec<BomberAgent>,
    pub bombs: Vec<Bomb>,
    pub items: Vec<Item>,
    pub flames: Vec<Pos>,
    pub done: bool,
    pub winner: Option<usize>,
    pub grid: StateTensor,
    pub rng: RngStream,
}

impl BomberState {
    pub fn is_rigid(&self, p: Pos) -> bool {
        self.rigid.contains(&p)
    }

    pub fn wood_at(&self, p: Pos) -> Option<usize> {
        self.wood
            .iter()
            .zip(&self.wood_alive)
            .position(|(w, alive)| *alive && *w == p)
    }

    pub fn bomb_at(&self, p: Pos) -> Option<&Bomb> {
        self.bombs.iter().find(|b| b.pos == p)
    }

    pub fn agent_at(&self, p: Pos) -> Option<usize> {
        self.agents.iter().position(|a| a.alive && a.pos == p)
    }

    /// All walls (rigid and wooden) in scan order; indices are `VertexId::Wall`.
    pub fn walls(&self) -> Vec<Pos> {
        let mut w: Vec<Pos> = self.rigid.iter().chain(&self.wood).copied().collect();
        w.sort();
        w
    }

    /// Cells covered by the explosion of `bomb` given the current walls.
    pub fn blast_cells(&self, bomb: &Bomb, wood_range: usize) -> (Vec<Pos>, Vec<usize>) {
        let mut cells = vec![bomb.pos];
        let mut destroyed = Vec::new();
        for dir in FOUR_DIRS {
            let mut p = bomb.pos;
            for dist in 1..=bomb.blast {
                let Some(q) = offset(p, dir, self.size) else { break };
                if self.is_rigid(q) {
                    break;
                }
                if let Some(w) = self.wood_at(q) {
                    if dist <= wood_range {
                        cells.push(q);
                        destroyed.push(w);
                    }
                    break;
                }
                cells.push(q);
                p = q;
            }
        }
        (cells, destroyed)
    }
}

#[derive(Clone, Debug)]
pub struct Bomber {
    cfg: EnvConfig,
    state: BomberState,
}

fn corners(d: usize) -> [Pos; NUM_AGENTS] {
    [(0, 0), (0, d - 1), (d - 1, d - 1), (d - 1, 0)]
}

fn transpose((i, j): Pos) -> Pos {
    (j, i)
}

impl Bomber {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.channels < ch::FIRST_RESERVED {
            return Err(MagnetError::config(
                "env.channels",
                format!("bomber needs at least {} channels", ch::FIRST_RESERVED),
            ));
        }
        let d = cfg.size;
        let state = BomberState {
            tick: 0,
            size: d,
            rigid: Vec::new(),
            wood: Vec::new(),
            wood_alive: Vec::new(),
            agents: Vec::new(),
            bombs: Vec::new(),
            items: Vec::new(),
            flames: Vec::new(),
            done: false,
            winner: None,
            grid: StateTensor::new(d, cfg.channels),
            rng: RngStream::new(0, "bomber/env"),
        };
        let mut env = Self { cfg, state };
        env.reset(0)?;
        Ok(env)
    }

    /// Hand-made map; `agents` lists the four agent positions in index order.
    pub fn crafted(cfg: EnvConfig, rigid: Vec<Pos>, wood: Vec<Pos>, agents: [Pos; NUM_AGENTS]) -> Result<Self> {
        let mut env = Self::new(EnvConfig {
            rigid: 0,
            wood: 0,
            ..cfg.clone()
        })?;
        env.cfg.rigid = rigid.len();
        env.cfg.wood = wood.len();
        let s = &mut env.state;
        s.rigid = rigid;
        s.rigid.sort();
        s.wood = wood;
        s.wood.sort();
        s.wood_alive = vec![true; s.wood.len()];
        for (a, pos) in s.agents.iter_mut().zip(agents) {
            a.pos = pos;
        }
        env.state.grid = env.observe_global();
        Ok(env)
    }

    pub fn state(&self) -> &BomberState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut BomberState {
        &mut self.state
    }

    pub fn reset_state(cfg: &EnvConfig, seed: u64) -> Result<(BomberState, StateTensor)> {
        let mut env = Self::new(cfg.clone())?;
        let t = env.reset(seed)?;
        Ok((env.state, t))
    }

    fn protected(&self, p: Pos) -> bool {
        corners(self.cfg.size)
            .iter()
            .any(|c| c.0.abs_diff(p.0) + c.1.abs_diff(p.1) <= 2)
    }

    fn place_symmetric(&self, rng: &mut RngStream, count: usize, taken: &BTreeSet<Pos>) -> Option<Vec<Pos>> {
        let d = self.cfg.size;
        let mut out: BTreeSet<Pos> = BTreeSet::new();
        let mut guard = 0;
        while out.len() < count && guard < 20_000 {
            guard += 1;
            let p = (rng.below(d), rng.below(d));
            let q = transpose(p);
            let new_cells = if p == q { 1 } else { 2 };
            if out.len() + new_cells > count {
                continue;
            }
            if self.protected(p) || taken.contains(&p) || taken.contains(&q) || out.contains(&p) || out.contains(&q) {
                continue;
            }
            out.insert(p);
            out.insert(q);
        }
        (out.len() == count).then(|| out.into_iter().collect())
    }

    fn generate(&mut self, seed: u64) -> Result<()> {
        let d = self.cfg.size;
        let mut rng = RngStream::new(seed, "bomber/map");
        for _ in 0..GENERATION_RETRIES {
            let Some(rigid) = self.place_symmetric(&mut rng, self.cfg.rigid, &BTreeSet::new()) else {
                continue;
            };
            let taken: BTreeSet<Pos> = rigid.iter().copied().collect();
            let Some(wood) = self.place_symmetric(&mut rng, self.cfg.wood, &taken) else {
                continue;
            };
            // every non-rigid cell must be reachable once wood is cleared
            let open: Vec<Pos> = (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .filter(|p| !taken.contains(p))
                .collect();
            let dist = bfs_distances(d, (0, 0), &FOUR_DIRS, |p| !taken.contains(&p));
            if open.iter().any(|p| dist[p.0 * d + p.1].is_none()) {
                continue;
            }
            self.state.rigid = rigid;
            self.state.wood_alive = vec![true; wood.len()];
            self.state.wood = wood;
            return Ok(());
        }
        Err(MagnetError::Generation(format!(
            "no connected symmetric bomber map after {GENERATION_RETRIES} attempts"
        )))
    }

    fn free_bomb_slot(&self) -> Option<usize> {
        (0..self.cfg.max_bombs).find(|s| self.state.bombs.iter().all(|b| b.slot != *s))
    }

    fn free_item_slot(&self) -> Option<usize> {
        (0..self.cfg.max_items).find(|s| self.state.items.iter().all(|b| b.slot != *s))
    }

    fn passable(&self, p: Pos) -> bool {
        !self.state.is_rigid(p) && self.state.wood_at(p).is_none() && self.state.bomb_at(p).is_none()
    }

    /// Events implied by two consecutive states.
    pub fn extract_events(pre: &BomberState, _actions: &[Action], post: &BomberState, wood_range: usize) -> Vec<Event> {
        let mut events = Vec::new();
        let mut exploded: Vec<&Bomb> = pre
            .bombs
            .iter()
            .filter(|b| !post.bombs.iter().any(|c| c.slot == b.slot && c.pos == b.pos))
            .collect();
        exploded.sort_by_key(|b| b.slot);
        let zones: Vec<(usize, Vec<Pos>)> = exploded
            .iter()
            .map(|b| (b.owner, pre.blast_cells(b, wood_range).0))
            .collect();
        for (victim, (before, after)) in pre.agents.iter().zip(&post.agents).enumerate() {
            if !(before.alive && !after.alive) {
                continue;
            }
            if let Some((owner, _)) = zones.iter().find(|(_, cells)| cells.contains(&after.pos)) {
                if pre.agents[*owner].team != before.team {
                    events.push(Event::new(
                        EventKind::KillEnemyAgent,
                        VertexId::Agent(*owner),
                        VertexId::Agent(victim),
                    ));
                }
            }
        }
        for item in &pre.items {
            if post.items.iter().any(|i| i.slot == item.slot && i.pos == item.pos) {
                continue;
            }
            if let Some(agent) = post.agents.iter().position(|a| a.alive && a.pos == item.pos) {
                let kind = match item.kind {
                    ItemKind::ExtraBomb => EventKind::PickUpExtraBomb,
                    ItemKind::BlastPower | ItemKind::Kick => EventKind::PickUpBlastPower,
                };
                events.push(Event::new(kind, VertexId::Agent(agent), VertexId::Item(item.slot)));
            }
        }
        events
    }

    fn validate_actions(&self, actions: &[Action]) -> Result<Vec<BomberMove>> {
        if actions.len() != NUM_AGENTS {
            return Err(MagnetError::Input(format!(
                "expected {NUM_AGENTS} actions, got {}",
                actions.len()
            )));
        }
        actions
            .iter()
            .enumerate()
            .map(|(i, a)| match a {
                Action::Discrete(m) => Ok(*m),
                _ => Err(MagnetError::Input(format!("agent {i}: bomber expects discrete actions"))),
            })
            .collect()
    }

    /// Cells threatened by any live bomb, with the smallest fuse reaching each.
    pub fn danger_map(&self) -> Vec<Option<u32>> {
        let d = self.cfg.size;
        let mut danger = vec![None; d * d];
        for b in &self.state.bombs {
            let (cells, _) = self.state.blast_cells(
                &Bomb {
                    blast: b.blast.max(self.cfg.wood_blast_range),
                    ..b.clone()
                },
                self.cfg.wood_blast_range,
            );
            for c in cells {
                let slot: &mut Option<u32> = &mut danger[c.0 * d + c.1];
                *slot = Some(slot.map_or(b.fuse, |f| f.min(b.fuse)));
            }
        }
        danger
    }

    /// First move of a shortest path from `from` to a cell accepted by
    /// `goal`, walking only through cells accepted by `walkable`.
    fn first_step(&self, from: Pos, goal: impl Fn(Pos) -> bool, walkable: impl Fn(Pos) -> bool) -> Option<BomberMove> {
        if goal(from) {
            return Some(BomberMove::NoOp);
        }
        let d = self.cfg.size;
        let mut best: Option<(usize, BomberMove)> = None;
        for m in [BomberMove::Up, BomberMove::Down, BomberMove::Left, BomberMove::Right] {
            let Some(q) = offset(from, m.delta(), d) else { continue };
            if !walkable(q) {
                continue;
            }
            let dist = bfs_distances(d, q, &FOUR_DIRS, &walkable);
            let reach = (0..d * d)
                .filter(|c| goal((c / d, c % d)))
                .filter_map(|c| dist[c])
                .min();
            if let Some(r) = reach {
                if best.map_or(true, |(b, _)| r < b) {
                    best = Some((r, m));
                }
            }
        }
        best.map(|(_, m)| m)
    }

    fn open_for(&self, agent: usize, p: Pos) -> bool {
        self.passable(p) && self.state.agent_at(p).map_or(true, |a| a == agent)
    }
}

impl Environment for Bomber {
    fn name(&self) -> &'static str {
        "bomber"
    }

    fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete
    }

    fn num_agents(&self) -> usize {
        NUM_AGENTS
    }

    fn team_of(&self, agent: usize) -> usize {
        agent % 2
    }

    fn learners(&self) -> Vec<usize> {
        vec![0, 2]
    }

    fn agent_vertex(&self, agent: usize) -> VertexId {
        VertexId::Agent(agent)
    }

    fn is_alive(&self, agent: usize) -> bool {
        self.state.agents.get(agent).is_some_and(|a| a.alive)
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
        self.generate(seed)?;
        let d = self.cfg.size;
        let s = &mut self.state;
        s.tick = 0;
        s.done = false;
        s.winner = None;
        s.bombs.clear();
        s.items.clear();
        s.flames.clear();
        s.rng = RngStream::new(seed, "bomber/env");
        s.agents = corners(d)
            .iter()
            .enumerate()
            .map(|(i, pos)| BomberAgent {
                pos: *pos,
                team: i % 2,
                alive: true,
                ammo: 1,
                blast: self.cfg.blast_range,
            })
            .collect();
        self.state.grid = self.observe_global();
        Ok(self.state.grid.clone())
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        if self.state.done {
            return Err(MagnetError::Contract("step called on a finished episode".into()));
        }
        let moves = self.validate_actions(actions)?;
        let pre = self.state.clone();
        let mut warnings = Vec::new();
        let d = self.cfg.size;
        self.state.tick += 1;
        for f in std::mem::take(&mut self.state.flames) {
            self.state.grid.clear(f, ch::FLAME);
        }

        for (i, m) in moves.iter().enumerate() {
            if !self.state.agents[i].alive {
                if *m != BomberMove::NoOp {
                    warnings.push(format!("ignored action for dead agent {i}"));
                }
                continue;
            }
            if *m != BomberMove::PlaceBomb {
                continue;
            }
            let pos = self.state.agents[i].pos;
            if self.state.agents[i].ammo == 0 || self.state.bomb_at(pos).is_some() {
                continue;
            }
            let Some(slot) = self.free_bomb_slot() else { continue };
            self.state.agents[i].ammo -= 1;
            self.state.bombs.push(Bomb {
                slot,
                pos,
                fuse: self.cfg.bomb_fuse,
                blast: self.state.agents[i].blast,
                owner: i,
                fresh: true,
            });
            self.state.grid.set(pos, ch::BOMB);
        }

        for (i, m) in moves.iter().enumerate() {
            if !self.state.agents[i].alive || m.delta() == (0, 0) {
                continue;
            }
            let from = self.state.agents[i].pos;
            let Some(to) = offset(from, m.delta(), d) else { continue };
            if !self.passable(to) || self.state.agent_at(to).is_some() {
                continue;
            }
            self.state.grid.clear(from, ch::AGENT_BASE + i);
            self.state.grid.set(to, ch::AGENT_BASE + i);
            self.state.agents[i].pos = to;
            if let Some(k) = self.state.items.iter().position(|it| it.pos == to) {
                let item = self.state.items.remove(k);
                match item.kind {
                    ItemKind::ExtraBomb => {
                        self.state.agents[i].ammo += 1;
                        self.state.grid.clear(to, ch::EXTRA_BOMB);
                    }
                    ItemKind::BlastPower | ItemKind::Kick => {
                        self.state.agents[i].blast += 1;
                        self.state.grid.clear(to, ch::BLAST_POWER);
                    }
                }
            }
        }

        for b in &mut self.state.bombs {
            if b.fresh {
                b.fresh = false;
            } else {
                b.fuse -= 1;
            }
        }
        // chain reactions: flames reaching a bomb detonate it this step
        let mut exploding: Vec<usize> = self
            .state
            .bombs
            .iter()
            .enumerate()
            .filter(|(_, b)| b.fuse == 0)
            .map(|(k, _)| k)
            .collect();
        let mut flames: BTreeSet<Pos> = BTreeSet::new();
        let mut destroyed: BTreeSet<usize> = BTreeSet::new();
        let mut k = 0;
        while k < exploding.len() {
            let bomb = self.state.bombs[exploding[k]].clone();
            let (cells, wood) = self.state.blast_cells(&bomb, self.cfg.wood_blast_range);
            for c in &cells {
                if let Some(other) = self.state.bombs.iter().position(|b| b.pos == *c) {
                    if !exploding.contains(&other) {
                        exploding.push(other);
                    }
                }
            }
            flames.extend(cells);
            destroyed.extend(wood);
            k += 1;
        }
        let mut exploded: Vec<Bomb> = exploding.iter().map(|k| self.state.bombs[*k].clone()).collect();
        exploded.sort_by_key(|b| b.slot);
        self.state.bombs.retain(|b| !exploded.iter().any(|e| e.slot == b.slot));
        for b in &exploded {
            self.state.grid.clear(b.pos, ch::BOMB);
            if self.state.agents[b.owner].alive {
                self.state.agents[b.owner].ammo += 1;
            }
        }
        for a in 0..NUM_AGENTS {
            let agent = &self.state.agents[a];
            if agent.alive && flames.contains(&agent.pos) {
                let pos = agent.pos;
                self.state.agents[a].alive = false;
                self.state.grid.clear(pos, ch::AGENT_BASE + a);
            }
        }
        for w in destroyed {
            let pos = self.state.wood[w];
            self.state.wood_alive[w] = false;
            self.state.grid.clear(pos, ch::WOOD);
            if self.state.rng.bernoulli(self.cfg.item_probability) {
                let kind = if self.state.rng.bernoulli(0.5) {
                    ItemKind::ExtraBomb
                } else {
                    ItemKind::BlastPower
                };
                if let Some(slot) = self.free_item_slot() {
                    self.state.items.push(Item { slot, pos, kind });
                    self.state.grid.set(
                        pos,
                        if kind == ItemKind::ExtraBomb { ch::EXTRA_BOMB } else { ch::BLAST_POWER },
                    );
                }
            }
        }
        // items caught in a blast burn
        let burned: Vec<Item> = self
            .state
            .items
            .iter()
            .filter(|it| flames.contains(&it.pos) && !pre.items.iter().all(|p| p.slot != it.slot))
            .cloned()
            .collect();
        for it in burned {
            self.state.items.retain(|x| x.slot != it.slot);
            self.state.grid.clear(
                it.pos,
                if it.kind == ItemKind::ExtraBomb { ch::EXTRA_BOMB } else { ch::BLAST_POWER },
            );
        }
        for f in &flames {
            self.state.grid.set(*f, ch::FLAME);
        }
        self.state.flames = flames.into_iter().collect();

        let events = Self::extract_events(&pre, actions, &self.state, self.cfg.wood_blast_range);
        let mut rewards = vec![0.0; NUM_AGENTS];
        if self.cfg.shaping {
            for e in &events {
                if let VertexId::Agent(i) = e.source {
                    rewards[i] += e.weight / self.cfg.event_scale;
                }
            }
        }
        let team_dead = |t: usize| self.state.agents.iter().filter(|a| a.team == t).all(|a| !a.alive);
        let (dead0, dead1) = (team_dead(0), team_dead(1));
        if dead0 || dead1 {
            self.state.done = true;
            self.state.winner = match (dead0, dead1) {
                (true, false) => Some(1),
                (false, true) => Some(0),
                _ => None,
            };
        } else if self.state.tick >= self.cfg.episode_limit {
            self.state.done = true;
        }
        if self.state.done {
            if let Some(w) = self.state.winner {
                for (a, r) in rewards.iter_mut().enumerate() {
                    *r += if self.team_of(a) == w { 1.0 } else { -1.0 };
                }
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
        let s = &self.state;
        let mut g = StateTensor::new(self.cfg.size, self.cfg.channels);
        for p in &s.rigid {
            g.set(*p, ch::RIGID);
        }
        for (p, alive) in s.wood.iter().zip(&s.wood_alive) {
            if *alive {
                g.set(*p, ch::WOOD);
            }
        }
        for b in &s.bombs {
            g.set(b.pos, ch::BOMB);
        }
        for f in &s.flames {
            g.set(*f, ch::FLAME);
        }
        for it in &s.items {
            g.set(
                it.pos,
                if it.kind == ItemKind::ExtraBomb { ch::EXTRA_BOMB } else { ch::BLAST_POWER },
            );
        }
        for (i, a) in s.agents.iter().enumerate() {
            if a.alive {
                g.set(a.pos, ch::AGENT_BASE + i);
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
        let s = &self.state;
        let mut out = Vec::new();
        for (i, a) in s.agents.iter().enumerate() {
            if a.alive {
                out.push(Vertex {
                    id: VertexId::Agent(i),
                    kind: VertexKind::Agent { team: a.team },
                    pos: a.pos,
                    scalar: 0.0,
                });
            }
        }
        for b in &s.bombs {
            out.push(Vertex {
                id: VertexId::Bomb(b.slot),
                kind: VertexKind::Bomb,
                pos: b.pos,
                scalar: b.fuse as f64 / 10.0,
            });
        }
        for it in &s.items {
            out.push(Vertex {
                id: VertexId::Item(it.slot),
                kind: VertexKind::Item(it.kind),
                pos: it.pos,
                scalar: 0.0,
            });
        }
        for (w, p) in s.walls().into_iter().enumerate() {
            if s.is_rigid(p) || s.wood_at(p).is_some() {
                out.push(Vertex {
                    id: VertexId::Wall(w),
                    kind: VertexKind::Wall,
                    pos: p,
                    scalar: 0.0,
                });
            }
        }
        out
    }

    fn object_capacity(&self) -> usize {
        2 + self.cfg.max_bombs + self.cfg.max_items + self.cfg.rigid + self.cfg.wood
    }

    fn column_of(&self, vertex: VertexId) -> Option<usize> {
        let bombs0 = 4;
        let items0 = bombs0 + self.cfg.max_bombs;
        let walls0 = items0 + self.cfg.max_items;
        match vertex {
            // rows first (0, 2), then the enemies (1, 3)
            VertexId::Agent(0) => Some(0),
            VertexId::Agent(2) => Some(1),
            VertexId::Agent(1) => Some(2),
            VertexId::Agent(3) => Some(3),
            VertexId::Bomb(s) if s < self.cfg.max_bombs => Some(bombs0 + s),
            VertexId::Item(s) if s < self.cfg.max_items => Some(items0 + s),
            VertexId::Wall(w) if w < self.cfg.rigid + self.cfg.wood => Some(walls0 + w),
            _ => None,
        }
    }

    fn scripted_action(&self, agent: usize, rng: &mut RngStream) -> Action {
        let s = &self.state;
        let me = s.agents[agent].pos;
        let d = self.cfg.size;
        let danger = self.danger_map();
        let safe = |p: Pos| danger[p.0 * d + p.1].is_none();
        let walk = |p: Pos| self.open_for(agent, p);

        if !safe(me) {
            if let Some(m) = self.first_step(me, safe, walk) {
                return Action::Discrete(m);
            }
            return Action::Discrete(BomberMove::NoOp);
        }

        let enemy_team = 1 - s.agents[agent].team;
        let adjacent = FOUR_DIRS.iter().filter_map(|dlt| offset(me, *dlt, d));
        let near_target = adjacent.clone().any(|q| {
            s.wood_at(q).is_some() || s.agent_at(q).is_some_and(|a| s.agents[a].team == enemy_team)
        });
        if near_target && s.agents[agent].ammo > 0 && s.bomb_at(me).is_none() {
            // only bomb when a hiding place remains reachable
            let trial = Bomb {
                slot: usize::MAX,
                pos: me,
                fuse: self.cfg.bomb_fuse,
                blast: s.agents[agent].blast,
                owner: agent,
                fresh: true,
            };
            let (zone, _) = s.blast_cells(&trial, self.cfg.wood_blast_range);
            let hide = |p: Pos| safe(p) && !zone.contains(&p);
            let walk_after = |p: Pos| p != me && walk(p);
            let escape = FOUR_DIRS
                .iter()
                .filter_map(|dlt| offset(me, *dlt, d))
                .filter(|q| walk_after(*q))
                .any(|q| {
                    let dist = bfs_distances(d, q, &FOUR_DIRS, walk_after);
                    (0..d * d).any(|c| {
                        dist[c].is_some_and(|x| (x as u32) < self.cfg.bomb_fuse) && hide((c / d, c % d))
                    })
                });
            if escape {
                return Action::Discrete(BomberMove::PlaceBomb);
            }
        }

        let safe_walk = |p: Pos| walk(p) && safe(p);
        if rng.bernoulli(self.cfg.scripted_epsilon) {
            let options: Vec<BomberMove> = [BomberMove::Up, BomberMove::Down, BomberMove::Left, BomberMove::Right]
                .into_iter()
                .filter(|m| offset(me, m.delta(), d).is_some_and(safe_walk))
                .chain(std::iter::once(BomberMove::NoOp))
                .collect();
            return Action::Discrete(options[rng.below(options.len())]);
        }
        let enemies: Vec<Pos> = s
            .agents
            .iter()
            .filter(|a| a.alive && a.team == enemy_team)
            .map(|a| a.pos)
            .collect();
        let next_to_enemy = |p: Pos| {
            FOUR_DIRS
                .iter()
                .filter_map(|dlt| offset(p, *dlt, d))
                .any(|q| enemies.contains(&q))
        };
        if let Some(m) = self.first_step(me, next_to_enemy, safe_walk) {
            return Action::Discrete(m);
        }
        let next_to_wood = |p: Pos| {
            FOUR_DIRS
                .iter()
                .filter_map(|dlt| offset(p, *dlt, d))
                .any(|q| s.wood_at(q).is_some())
        };
        if let Some(m) = self.first_step(me, next_to_wood, safe_walk) {
            return Action::Discrete(m);
        }
        Action::Discrete(BomberMove::NoOp)
    }

    fn state_digest(&self) -> String {
        let mut s = self.observe_global().digest();
        for a in &self.state.agents {
            s.push_str(&format!(":{}{}", a.ammo, a.blast));
        }
        for b in &self.state.bombs {
            s.push_str(&format!(":{}", b.fuse));
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
