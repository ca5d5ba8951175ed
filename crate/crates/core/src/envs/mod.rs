//! Grid-world environments: predator-prey and a two-team bomber game.
//!
//! Both are deterministic given a seed and the joint action sequence. Each
//! exposes its state as a `D x D x M` occupancy tensor, per-vertex local
//! observations, a scripted default policy, and the events used by the
//! heuristic graph loss.

mod bomber;
mod events;
mod predator_prey;
pub mod replay;
mod state;

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngStream, Tensor};
use crate::error::{MagnetError, Result};
use crate::registry::Registry;

pub use bomber::{Bomb, Bomber, BomberAgent, BomberState, Item, ItemKind};
pub use events::{Event, EventKind, VertexId};
pub use predator_prey::{PpAgent, PpState, PredatorPrey, Prey};
pub use state::{bomber_channels, pp_channels, SparseState, StateTensor};

/// `(row, col)` grid coordinate.
pub type Pos = (usize, usize);

/// Discrete bomber move; the index order is the one-hot layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BomberMove {
    Up,
    Down,
    Left,
    Right,
    PlaceBomb,
    NoOp,
}

impl BomberMove {
    pub const ALL: [BomberMove; 6] = [
        BomberMove::Up,
        BomberMove::Down,
        BomberMove::Left,
        BomberMove::Right,
        BomberMove::PlaceBomb,
        BomberMove::NoOp,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|m| *m == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| MagnetError::Input(format!("bomber action index {i} out of 0..6")))
    }

    /// Padded `1 x 6` one-hot encoding.
    pub fn one_hot(self) -> [f64; 6] {
        let mut v = [0.0; 6];
        v[self.index()] = 1.0;
        v
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            BomberMove::Up => (-1, 0),
            BomberMove::Down => (1, 0),
            BomberMove::Left => (0, -1),
            BomberMove::Right => (0, 1),
            _ => (0, 0),
        }
    }
}

/// Per-agent action. Predator-prey agents move with a heading in `[0, 2π)`
/// (0 points along increasing column, π/2 along increasing row) and a speed
/// in `[0, 1]`; bomber agents pick one of six discrete moves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Continuous { direction: f64, speed: f64 },
    Discrete(BomberMove),
}

impl Action {
    pub fn noop(space: ActionSpace) -> Self {
        match space {
            ActionSpace::Continuous => Action::Continuous {
                direction: 0.0,
                speed: 0.0,
            },
            ActionSpace::Discrete => Action::Discrete(BomberMove::NoOp),
        }
    }

    /// Action from a unit-box velocity `(v_col, v_row)`.
    pub fn from_velocity(v_col: f64, v_row: f64) -> Self {
        let speed = (v_col * v_col + v_row * v_row).sqrt().min(1.0);
        let mut direction = v_row.atan2(v_col);
        if direction < 0.0 {
            direction += 2.0 * PI;
        }
        if direction >= 2.0 * PI {
            direction = 0.0;
        }
        Action::Continuous { direction, speed }
    }

    /// Velocity in `(col, row)` coordinates for continuous actions.
    pub fn velocity(&self) -> Option<(f64, f64)> {
        match *self {
            Action::Continuous { direction, speed } => {
                Some((speed * direction.cos(), speed * direction.sin()))
            }
            Action::Discrete(_) => None,
        }
    }

    /// Encoding consumed by critics: velocity for continuous actions,
    /// one-hot for discrete ones.
    pub fn encode(&self) -> Vec<f64> {
        match self {
            Action::Continuous { .. } => {
                let (c, r) = self.velocity().unwrap();
                vec![c, r]
            }
            Action::Discrete(m) => m.one_hot().to_vec(),
        }
    }

    /// Discretised continuous action set: two speeds by ten headings.
    pub fn discretized(index: usize) -> Self {
        let speed = if index < 10 { 0.5 } else { 1.0 };
        let direction = (index % 10) as f64 * 2.0 * PI / 10.0;
        Action::Continuous { direction, speed }
    }

    pub const DISCRETIZED_COUNT: usize = 20;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionSpace {
    Continuous,
    Discrete,
}

impl ActionSpace {
    /// Width of [`Action::encode`].
    pub fn encoding_width(self) -> usize {
        match self {
            ActionSpace::Continuous => 2,
            ActionSpace::Discrete => 6,
        }
    }
}

/// What kind of thing a vertex is, independent of any type schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexKind {
    Agent { team: usize },
    Prey,
    Wall,
    Bomb,
    Item(ItemKind),
}

/// A present vertex of the relevance graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: VertexId,
    pub kind: VertexKind,
    pub pos: Pos,
    /// `fuse/10` for bombs, `health/10` for prey, 0 otherwise.
    pub scalar: f64,
}

/// Local observation `O_v`: a `K x K x M` crop of the global tensor centred
/// on the vertex plus scalar features `[scalar, row/(D−1), col/(D−1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalObs {
    pub crop: Tensor,
    pub scalars: [f64; 3],
}

impl LocalObs {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.crop.data().to_vec();
        v.extend_from_slice(&self.scalars);
        v
    }

    pub fn width(view: usize, channels: usize) -> usize {
        view * view * channels + 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: StateTensor,
    /// One reward per environment agent.
    pub rewards: Vec<f64>,
    pub events: Vec<Event>,
    pub done: bool,
    /// Winning team, `None` while running or on a draw.
    pub winner: Option<usize>,
    pub warnings: Vec<String>,
}

/// Settings shared by both environments. Fields not used by an environment
/// are ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Registered environment name: `predator-prey` or `bomber`.
    pub kind: String,
    /// Grid side `D`.
    pub size: usize,
    /// Channel count `M`.
    pub channels: usize,
    /// Local observation crop side `K`.
    pub view: usize,
    pub episode_limit: u64,
    /// Add `s(ξ)/event_scale` per event to the involved agent's reward.
    pub shaping: bool,
    pub event_scale: f64,
    /// Learning-team predators.
    pub predators: usize,
    /// Scripted second predator team.
    pub rival_predators: usize,
    pub prey: usize,
    pub obstacles: usize,
    /// Chebyshev radius within which a predator wounds a prey.
    pub attack_range: usize,
    /// Grid moves per tick for prey.
    pub prey_speed: usize,
    pub prey_health: u32,
    /// Bomber: probability that a destroyed wooden square drops an item.
    pub item_probability: f64,
    pub wood: usize,
    pub rigid: usize,
    pub bomb_fuse: u32,
    pub blast_range: usize,
    pub wood_blast_range: usize,
    pub max_bombs: usize,
    pub max_items: usize,
    pub scripted_epsilon: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: "predator-prey".into(),
            size: 16,
            channels: pp_channels::DEFAULT_CHANNELS,
            view: 5,
            episode_limit: 500,
            shaping: true,
            event_scale: 100.0,
            predators: 3,
            rival_predators: 0,
            prey: 1,
            obstacles: 8,
            attack_range: 1,
            prey_speed: 1,
            prey_health: 10,
            item_probability: 0.3,
            wood: 20,
            rigid: 12,
            bomb_fuse: 10,
            blast_range: 4,
            wood_blast_range: 1,
            max_bombs: 8,
            max_items: 8,
            scripted_epsilon: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn predator_prey(size: usize) -> Self {
        Self {
            size,
            ..Default::default()
        }
    }

    pub fn bomber(size: usize) -> Self {
        Self {
            kind: "bomber".into(),
            size,
            channels: bomber_channels::DEFAULT_CHANNELS,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(MagnetError::config("env.size", "grid size must be at least 8"));
        }
        if self.view == 0 || self.view % 2 == 0 {
            return Err(MagnetError::config("env.view", "view must be a positive odd number"));
        }
        if !(0.0..=1.0).contains(&self.item_probability) {
            return Err(MagnetError::config("env.item_probability", "must lie in [0, 1]"));
        }
        if self.event_scale <= 0.0 {
            return Err(MagnetError::config("env.event_scale", "must be positive"));
        }
        if self.bomb_fuse == 0 || self.bomb_fuse > 10 {
            return Err(MagnetError::config("env.bomb_fuse", "must lie in 1..=10"));
        }
        Ok(())
    }
}

/// Common interface of the grid games.
pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn config(&self) -> &EnvConfig;
    fn action_space(&self) -> ActionSpace;
    /// All agents that take actions, learners and scripted ones alike.
    fn num_agents(&self) -> usize;
    fn team_of(&self, agent: usize) -> usize;
    /// Agents controlled by the learning team (graph rows, in order).
    fn learners(&self) -> Vec<usize>;
    fn agent_vertex(&self, agent: usize) -> VertexId;
    fn is_alive(&self, agent: usize) -> bool;
    fn tick(&self) -> u64;
    fn is_done(&self) -> bool;
    fn winner(&self) -> Option<usize>;

    fn reset(&mut self, seed: u64) -> Result<StateTensor>;
    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome>;

    /// Tensor rebuilt from the symbolic state.
    fn observe_global(&self) -> StateTensor;
    /// Tensor maintained incrementally by `step`.
    fn grid(&self) -> &StateTensor;
    fn observe_local(&self, vertex: VertexId) -> Result<LocalObs>;
    fn vertices(&self) -> Vec<Vertex>;

    /// Maximum number of non-row vertices `|O|`.
    fn object_capacity(&self) -> usize;
    /// Graph column of a vertex (`0..|A|+|O|`).
    fn column_of(&self, vertex: VertexId) -> Option<usize>;

    fn scripted_action(&self, agent: usize, rng: &mut RngStream) -> Action;
    fn state_digest(&self) -> String;
    fn rng_digest(&self) -> String;
    fn clone_env(&self) -> Box<dyn Environment>;

    fn num_rows(&self) -> usize {
        self.learners().len()
    }

    fn num_columns(&self) -> usize {
        self.num_rows() + self.object_capacity()
    }

    fn row_of(&self, vertex: VertexId) -> Option<usize> {
        self.learners()
            .iter()
            .position(|a| self.agent_vertex(*a) == vertex)
    }

    fn local_obs_width(&self) -> usize {
        LocalObs::width(self.config().view, self.config().channels)
    }

    /// Scripted actions for every agent.
    fn scripted_joint_action(&self, rng: &mut RngStream) -> Vec<Action> {
        (0..self.num_agents())
            .map(|a| {
                if self.is_alive(a) {
                    self.scripted_action(a, rng)
                } else {
                    Action::noop(self.action_space())
                }
            })
            .collect()
    }
}

pub type EnvConstructor = fn(&EnvConfig) -> Result<Box<dyn Environment>>;

/// Registry of environment constructors keyed by name.
pub fn env_registry() -> Registry<EnvConstructor> {
    let mut r: Registry<EnvConstructor> = Registry::new("environment");
    r.register("predator-prey", |c| Ok(Box::new(PredatorPrey::new(c.clone())?)));
    r.register("bomber", |c| Ok(Box::new(Bomber::new(c.clone())?)));
    r
}

pub fn make_env(config: &EnvConfig) -> Result<Box<dyn Environment>> {
    let ctor = env_registry().get(&config.kind)?;
    ctor(config)
}

pub(crate) fn crop_local(grid: &StateTensor, center: Pos, view: usize) -> Tensor {
    let (d, _, m) = grid.dims();
    let half = (view / 2) as isize;
    let mut data = vec![0.0; view * view * m];
    for di in 0..view {
        for dj in 0..view {
            let i = center.0 as isize + di as isize - half;
            let j = center.1 as isize + dj as isize - half;
            if i < 0 || j < 0 || i >= d as isize || j >= d as isize {
                continue;
            }
            for k in 0..m {
                data[(di * view + dj) * m + k] = grid.get((i as usize, j as usize), k) as f64;
            }
        }
    }
    Tensor::new(vec![view, view, m], data).expect("crop shape")
}

pub(crate) fn offset(pos: Pos, d: (isize, isize), size: usize) -> Option<Pos> {
    let i = pos.0 as isize + d.0;
    let j = pos.1 as isize + d.1;
    (i >= 0 && j >= 0 && i < size as isize && j < size as isize).then_some((i as usize, j as usize))
}

pub(crate) const FOUR_DIRS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
pub(crate) const EIGHT_DIRS: [(isize, isize); 8] = [
    (-1, 0),
    (1, 0),
    (0, -1),
    (0, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
    (1, 1),
];

/// Breadth-first distances from `start` over cells accepted by `passable`.
pub(crate) fn bfs_distances(
    size: usize,
    start: Pos,
    dirs: &[(isize, isize)],
    passable: impl Fn(Pos) -> bool,
) -> Vec<Option<usize>> {
    let mut dist = vec![None; size * size];
    let mut queue = VecDeque::new();
    dist[start.0 * size + start.1] = Some(0);
    queue.push_back(start);
    while let Some(p) = queue.pop_front() {
        let dp = dist[p.0 * size + p.1].unwrap();
        for d in dirs {
            if let Some(q) = offset(p, *d, size) {
                if dist[q.0 * size + q.1].is_none() && passable(q) {
                    dist[q.0 * size + q.1] = Some(dp + 1);
                    queue.push_back(q);
                }
            }
        }
    }
    dist
}
