//! Decision-making stage: typed message passing over the relevance graph,
//! used as the deterministic actor of DDPG.
//!
//! Every present vertex `v` gets an initial information vector
//! `μ⁰_v = MLP_init^{b(v)}(O_v)`. Each round, every edge `(v, u)` carries
//! `w_(v,u) · MLP_msg^{c(v,u)}(μ_v)` and every vertex updates
//! `μ_v ← LSTM_up^{b(v)}(μ_v, Σ incoming)`. After `T` rounds each agent's
//! head maps `μ^T` together with its pooled local features to an action.
//!
//! Graph rows only cover the learning team, so the entries are read as
//! follows: for two row agents `a`, `b` the message `a → b` uses `w[a][b]`;
//! for a row agent `a` and any other vertex `u` the single entry `w[a][u]`
//! weights both `a → u` and `u → a`.

mod fallback;
mod message;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, RngStream, Tape, Var};
use crate::envs::{crop_local, Action, ActionSpace, BomberMove, StateTensor};
use crate::error::{MagnetError, Result};
use crate::graph::{TypeSchema, VertexTable};
use crate::registry::Registry;

pub use fallback::MlpDecision;
pub use message::{edge_messages, MessagePassing, TypedNetBank};

thread_local! {
    static MESSAGE_ROUNDS: Cell<u64> = const { Cell::new(0) };
}

/// Number of message rounds run on this thread so far (a dispatch probe).
pub fn message_round_calls() -> u64 {
    MESSAGE_ROUNDS.with(|c| c.get())
}

pub(crate) fn count_message_round() {
    MESSAGE_ROUNDS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorConfig {
    /// Registered decision module: `message-passing` or `mlp`.
    pub decision: String,
    /// Information vector width `H`.
    pub hidden: usize,
    /// Message rounds `T`.
    pub mp_iterations: usize,
    pub init_hidden: Vec<usize>,
    pub message_hidden: Vec<usize>,
    pub choice_hidden: Vec<usize>,
    /// Hidden sizes of the MLP decision module.
    pub fallback_hidden: Vec<usize>,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            decision: "message-passing".into(),
            hidden: 32,
            mp_iterations: 5,
            init_hidden: vec![64],
            message_hidden: vec![32],
            choice_hidden: vec![64],
            fallback_hidden: vec![128, 128, 32],
        }
    }
}

/// Dimensions an actor is built for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorShape {
    pub schema: TypeSchema,
    pub rows: usize,
    pub cols: usize,
    /// Local observation width `K²M + 3`.
    pub obs_width: usize,
    /// Pooled local feature width `M + 3`.
    pub feature_width: usize,
    pub action_space: ActionSpace,
}

impl ActorShape {
    pub fn head_width(&self) -> usize {
        self.action_space.encoding_width()
    }
}

/// Per-vertex observations for one decision.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionInput {
    pub table: VertexTable,
    /// Flat local observation per column; `None` for absent columns.
    pub observations: Vec<Option<Vec<f64>>>,
    /// Pooled local features per row; `None` for absent rows.
    pub features: Vec<Option<Vec<f64>>>,
}

/// Channel means of a `K x K x M` crop followed by the three scalars.
pub fn pooled_features(obs: &[f64], channels: usize) -> Vec<f64> {
    let cells = (obs.len() - 3) / channels;
    let mut f = vec![0.0; channels + 3];
    for cell in 0..cells {
        for k in 0..channels {
            f[k] += obs[cell * channels + k];
        }
    }
    for v in &mut f[..channels] {
        *v /= cells as f64;
    }
    f[channels..].copy_from_slice(&obs[obs.len() - 3..]);
    f
}

impl DecisionInput {
    /// Builds every vertex's local observation from the global grid.
    pub fn from_grid(grid: &StateTensor, table: &VertexTable, view: usize) -> Self {
        let (d, _, m) = grid.dims();
        let scale = (d - 1) as f64;
        let observations: Vec<Option<Vec<f64>>> = table
            .columns
            .iter()
            .map(|c| {
                c.as_ref().map(|v| {
                    let mut o = crop_local(grid, v.pos, view).into_data();
                    o.extend([v.scalar, v.pos.0 as f64 / scale, v.pos.1 as f64 / scale]);
                    o
                })
            })
            .collect();
        let features = (0..table.rows)
            .map(|r| observations[r].as_ref().map(|o| pooled_features(o, m)))
            .collect();
        Self {
            table: table.clone(),
            observations,
            features,
        }
    }

    pub fn check(&self, shape: &ActorShape) -> Result<()> {
        if self.table.rows != shape.rows || self.table.cols() != shape.cols {
            return Err(MagnetError::Consistency(format!(
                "decision input is {}x{}, actor expects {}x{}",
                self.table.rows,
                self.table.cols(),
                shape.rows,
                shape.cols
            )));
        }
        for (c, v) in self.table.columns.iter().enumerate() {
            match (v, &self.observations[c]) {
                (Some(_), None) => {
                    return Err(MagnetError::Input(format!("vertex in column {c} has no observation")))
                }
                (Some(_), Some(o)) if o.len() != shape.obs_width => {
                    return Err(MagnetError::Dimension(format!(
                        "observation of column {c} has width {}, expected {}",
                        o.len(),
                        shape.obs_width
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Raw head outputs per row agent (`None` for absent agents): mean
/// velocity in `[-1, 1]²` for continuous spaces, six logits for discrete.
#[derive(Clone, Debug)]
pub struct ActorOutput {
    pub heads: Vec<Option<Var>>,
    /// Final information vectors `[n, H]` (message passing only).
    pub mu: Option<Var>,
}

/// A decision module maps a graph plus observations to per-agent heads.
pub trait DecisionModule: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn shape(&self) -> &ActorShape;
    /// `graph` must be an `[R, C]` variable on `tape`.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: &DecisionInput, graph: Var) -> Result<ActorOutput>;
}

pub type DecisionCtor = fn(&mut ParamStore, &str, &ActorConfig, ActorShape, &mut RngStream) -> Result<Box<dyn DecisionModule>>;

/// Registry of decision modules keyed by name.
pub fn decision_registry() -> Registry<DecisionCtor> {
    let mut r: Registry<DecisionCtor> = Registry::new("decision module");
    r.register("message-passing", |store, name, cfg, shape, rng| {
        Ok(Box::new(MessagePassing::new(store, name, cfg, shape, rng)?))
    });
    r.register("mlp", |store, name, cfg, shape, rng| {
        Ok(Box::new(MlpDecision::new(store, name, cfg, shape, rng)?))
    });
    r
}

/// Turns a head output into an executed action and its encoding.
///
/// Continuous: `clamp(mean + σ·N(0,1), −1, 1)` read as a velocity.
/// Discrete: `argmax(logits + σ·Gumbel)` with a one-hot encoding.
pub fn choose_action(head: &[f64], space: ActionSpace, sigma: f64, rng: &mut RngStream) -> Result<(Action, Vec<f64>)> {
    if head.len() != space.encoding_width() {
        return Err(MagnetError::Contract(format!(
            "head width {} does not match the action space ({})",
            head.len(),
            space.encoding_width()
        )));
    }
    match space {
        ActionSpace::Continuous => {
            let mut v = [head[0], head[1]];
            if sigma > 0.0 {
                for x in &mut v {
                    *x = (*x + sigma * rng.normal()).clamp(-1.0, 1.0);
                }
            }
            Ok((Action::from_velocity(v[0], v[1]), v.to_vec()))
        }
        ActionSpace::Discrete => {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, l) in head.iter().enumerate() {
                let score = if sigma > 0.0 { l + sigma * rng.gumbel() } else { *l };
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            let m = BomberMove::from_index(best)?;
            Ok((Action::Discrete(m), m.one_hot().to_vec()))
        }
    }
}

/// Differentiable action encoding fed to the critic during the actor
/// update: the mean velocity itself, or the softmax of the logits.
pub fn head_encoding(tape: &mut Tape, head: Var, space: ActionSpace) -> Var {
    match space {
        ActionSpace::Continuous => head,
        ActionSpace::Discrete => tape.softmax_rows(head),
    }
}
