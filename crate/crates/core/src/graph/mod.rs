//! Relevance-graph generation stage: vertex/edge typing, the graph
//! generation network (GGN), and the losses the GGN is trained with.
//!
//! A relevance graph is an `R x C` matrix where the `R` rows are the
//! learning team's agents and the `C = R + |O|` columns are those agents
//! followed by a fixed number of object slots. Entry `(r, c)` is the weight
//! of the edge from agent `r` to vertex `c`.

mod dot;
mod ggn;
mod history;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::envs::{Environment, Event, ItemKind, Pos, VertexId, VertexKind};
use crate::error::{MagnetError, Result};

pub use dot::{export_graph_dot, parse_dot_edges, write_graph_dot};
pub use ggn::{ggn_core_registry, Ggn, GgnConfig, GgnCore, GgnCoreCtor, MlpCore, SelfAttentionCore};
pub use history::{build_ggn_input, GgnInput, GraphHistory};

/// Which environment's typing rules apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TypeSchema {
    PredatorPrey,
    Bomber,
}

const PP_NAMES: [&str; 4] = ["predator-team-1", "predator-team-2", "prey", "wall"];
const BOMBER_NAMES: [&str; 7] = [
    "ally",
    "enemy",
    "placed-bomb",
    "increase-kick",
    "increase-blast-power",
    "extra-bomb",
    "wall",
];

impl TypeSchema {
    pub fn for_env(env: &dyn Environment) -> Result<Self> {
        match env.name() {
            "predator-prey" => Ok(Self::PredatorPrey),
            "bomber" => Ok(Self::Bomber),
            other => Err(MagnetError::Schema(format!("no type schema for environment {other}"))),
        }
    }

    pub fn num_vertex_types(self) -> usize {
        self.type_names().len()
    }

    pub fn num_edge_types(self) -> usize {
        match self {
            Self::PredatorPrey => 3,
            Self::Bomber => 2,
        }
    }

    pub fn type_names(self) -> &'static [&'static str] {
        match self {
            Self::PredatorPrey => &PP_NAMES,
            Self::Bomber => &BOMBER_NAMES,
        }
    }

    /// `b(v)`. Agent teams are relative to the learning team 0.
    pub fn vertex_type(self, kind: &VertexKind) -> Result<usize> {
        let t = match (self, kind) {
            (Self::PredatorPrey, VertexKind::Agent { team: 0 }) => 0,
            (Self::PredatorPrey, VertexKind::Agent { team: 1 }) => 1,
            (Self::PredatorPrey, VertexKind::Prey) => 2,
            (Self::PredatorPrey, VertexKind::Wall) => 3,
            (Self::Bomber, VertexKind::Agent { team: 0 }) => 0,
            (Self::Bomber, VertexKind::Agent { team: 1 }) => 1,
            (Self::Bomber, VertexKind::Bomb) => 2,
            (Self::Bomber, VertexKind::Item(ItemKind::Kick)) => 3,
            (Self::Bomber, VertexKind::Item(ItemKind::BlastPower)) => 4,
            (Self::Bomber, VertexKind::Item(ItemKind::ExtraBomb)) => 5,
            (Self::Bomber, VertexKind::Wall) => 6,
            (schema, kind) => {
                return Err(MagnetError::Schema(format!("{kind:?} is outside the {schema:?} schema")))
            }
        };
        Ok(t)
    }

    pub fn is_agent_type(self, b: usize) -> bool {
        b <= 1
    }

    /// `c(v, u)`, a symmetric function of the endpoint types.
    pub fn edge_type(self, b1: usize, b2: usize) -> usize {
        let both_agents = self.is_agent_type(b1) && self.is_agent_type(b2);
        match self {
            Self::PredatorPrey if both_agents => usize::from(b1 != b2),
            Self::PredatorPrey => 2,
            Self::Bomber if both_agents => 0,
            Self::Bomber => 1,
        }
    }
}

/// A present vertex with its column and type.
#[derive(Clone, Debug, PartialEq)]
pub struct TypedVertex {
    pub id: VertexId,
    pub column: usize,
    pub vertex_type: usize,
    pub pos: Pos,
    /// Fuse/10 for bombs, health/10 for prey, 0 otherwise.
    pub scalar: f64,
}

/// Column layout of the relevance graph at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexTable {
    pub schema: TypeSchema,
    pub rows: usize,
    /// `None` for absent columns.
    pub columns: Vec<Option<TypedVertex>>,
}

impl VertexTable {
    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn present(&self) -> impl Iterator<Item = &TypedVertex> {
        self.columns.iter().flatten()
    }

    pub fn num_present(&self) -> usize {
        self.present().count()
    }

    pub fn is_present(&self, column: usize) -> bool {
        self.columns.get(column).is_some_and(|c| c.is_some())
    }

    /// Row-major `R x C` mask: 1 where row and column vertices are both
    /// present and the entry is off the diagonal.
    pub fn mask(&self) -> Vec<f64> {
        let c = self.cols();
        let mut m = vec![0.0; self.rows * c];
        for r in 0..self.rows {
            if !self.is_present(r) {
                continue;
            }
            for col in 0..c {
                if col != r && self.is_present(col) {
                    m[r * c + col] = 1.0;
                }
            }
        }
        m
    }

    /// Edge type between row `r` and column `c`, if both are present.
    pub fn edge_type(&self, r: usize, c: usize) -> Option<usize> {
        let a = self.columns.get(r)?.as_ref()?;
        let b = self.columns.get(c)?.as_ref()?;
        Some(self.schema.edge_type(a.vertex_type, b.vertex_type))
    }
}

/// `assign_types`: types every present vertex of the environment and
/// places it in its column.
pub fn assign_types(env: &dyn Environment) -> Result<VertexTable> {
    let schema = TypeSchema::for_env(env)?;
    let mut columns = vec![None; env.num_columns()];
    for v in env.vertices() {
        let column = env
            .column_of(v.id)
            .ok_or_else(|| MagnetError::Schema(format!("vertex {:?} has no column", v.id)))?;
        if column >= columns.len() {
            return Err(MagnetError::Schema(format!("column {column} out of range")));
        }
        columns[column] = Some(TypedVertex {
            id: v.id,
            column,
            vertex_type: schema.vertex_type(&v.kind)?,
            pos: v.pos,
            scalar: v.scalar,
        });
    }
    Ok(VertexTable {
        schema,
        rows: env.num_rows(),
        columns,
    })
}

/// A generated relevance graph together with its column layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceGraph {
    /// `[R, C]`, entries in `[-1, 1]`, masked entries exactly 0.
    pub weights: Tensor,
    pub table: VertexTable,
    pub tick: u64,
}

impl RelevanceGraph {
    pub fn rows(&self) -> usize {
        self.table.rows
    }

    pub fn cols(&self) -> usize {
        self.table.cols()
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights.data()[r * self.cols() + c]
    }

    /// Non-zero edges `(row, col, weight)` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let c = self.cols();
        self.weights
            .data()
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| (i / c, i % c, *w))
            .collect()
    }
}

/// Squared Frobenius distance `Σ (W_t − W_prev)²`; `W_prev` is a constant.
pub fn graph_temporal_loss(tape: &mut Tape, w_t: Var, w_prev: &Tensor) -> Result<Var> {
    if tape.shape(w_t) != w_prev.shape() {
        return Err(MagnetError::Dimension(format!(
            "graph loss: current graph {:?} vs previous {:?}",
            tape.shape(w_t),
            w_prev.shape()
        )));
    }
    let prev = tape.constant(w_prev.clone());
    let diff = tape.sub(w_t, prev)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// An event bound to a graph entry with its normalised target weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeTarget {
    pub row: usize,
    pub col: usize,
    pub target: f64,
}

/// Maps events onto graph entries, `s(ξ) / event_scale`. Events whose
/// source is not a row agent (scripted opponents, prey) or whose target has
/// no column are dropped.
pub fn event_edges(env: &dyn Environment, events: &[Event], event_scale: f64) -> Vec<EdgeTarget> {
    events
        .iter()
        .filter_map(|e| {
            Some(EdgeTarget {
                row: env.row_of(e.source)?,
                col: env.column_of(e.target)?,
                target: e.weight / event_scale,
            })
        })
        .collect()
}

/// Temporal loss plus `Σ_ξ (w_(v,u) − s(ξ))²` over the bound events.
pub fn graph_heuristic_loss(tape: &mut Tape, w_t: Var, w_prev: &Tensor, events: &[EdgeTarget]) -> Result<Var> {
    let mut loss = graph_temporal_loss(tape, w_t, w_prev)?;
    let (rows, cols) = tape.value(w_t).dims2();
    for e in events {
        if e.row >= rows || e.col >= cols {
            return Err(MagnetError::Input(format!(
                "event edge ({}, {}) outside a {rows}x{cols} graph",
                e.row, e.col
            )));
        }
        let w = tape.element(w_t, e.row * cols + e.col)?;
        let d = tape.add_scalar(w, -e.target);
        let sq = tape.square(d);
        loss = tape.add(loss, sq)?;
    }
    Ok(loss)
}

/// How generated graphs are distributed over a team.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    /// Every agent has its own GGN and uses its own graph.
    Individual,
    /// One team-level GGN whose graph every teammate consumes (GS).
    Shared,
}

/// Graph used by each row agent. In shared mode `graphs` holds the single
/// team graph; in individual mode one graph per row agent.
pub fn select_graph(graphs: &[RelevanceGraph], mode: GraphMode, rows: usize) -> Result<Vec<RelevanceGraph>> {
    match mode {
        GraphMode::Shared => {
            let g = graphs
                .first()
                .ok_or_else(|| MagnetError::Input("no team graph to share".into()))?;
            Ok(vec![g.clone(); rows])
        }
        GraphMode::Individual => {
            if graphs.len() != rows {
                return Err(MagnetError::Input(format!(
                    "individual mode needs {rows} graphs, got {}",
                    graphs.len()
                )));
            }
            Ok(graphs.to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, PredatorPrey};

    #[test]
    fn predator_prey_edge_types() {
        let s = TypeSchema::PredatorPrey;
        assert_eq!(s.edge_type(0, 0), 0);
        assert_eq!(s.edge_type(0, 1), 1);
        assert_eq!(s.edge_type(0, 3), 2);
        assert_eq!(s.edge_type(0, 2), 2);
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(s.edge_type(a, b), s.edge_type(b, a));
            }
        }
    }

    #[test]
    fn bomber_agent_bomb_edge_is_type_one() {
        let s = TypeSchema::Bomber;
        let agent = s.vertex_type(&VertexKind::Agent { team: 0 }).unwrap();
        let bomb = s.vertex_type(&VertexKind::Bomb).unwrap();
        assert_eq!(s.edge_type(agent, bomb), 1);
        assert_eq!(s.edge_type(0, 1), 0);
        assert!(s.vertex_type(&VertexKind::Prey).is_err());
    }

    #[test]
    fn temporal_loss_hand_value() {
        let mut tape = Tape::new();
        let prev = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut cur = prev.clone();
        cur.data_mut()[4] += 0.2;
        let w = tape.leaf(cur);
        let l = graph_temporal_loss(&mut tape, w, &prev).unwrap();
        assert!((tape.value(l).item() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn single_kill_event_loss() {
        let mut tape = Tape::new();
        let w0 = Tensor::matrix(1, 2, vec![0.0, 0.5]).unwrap();
        let w = tape.leaf(w0.clone());
        let e = [EdgeTarget {
            row: 0,
            col: 1,
            target: 1.0,
        }];
        let l = graph_heuristic_loss(&mut tape, w, &w0, &e).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-12);
        let bad = [EdgeTarget {
            row: 0,
            col: 2,
            target: 1.0,
        }];
        let mut tape = Tape::new();
        let w = tape.leaf(w0.clone());
        assert!(matches!(
            graph_heuristic_loss(&mut tape, w, &w0, &bad),
            Err(MagnetError::Input(_))
        ));
    }

    #[test]
    fn table_masks_absent_and_diagonal() {
        let env = PredatorPrey::new(EnvConfig::predator_prey(10)).unwrap();
        let t = assign_types(&env).unwrap();
        let m = t.mask();
        let c = t.cols();
        for r in 0..t.rows {
            assert_eq!(m[r * c + r], 0.0);
        }
        assert_eq!(t.num_present(), 3 + 1 + 8);
        assert_eq!(t.edge_type(0, 1), Some(0));
        assert_eq!(t.edge_type(0, 11), Some(2));
    }

    #[test]
    fn shared_mode_returns_same_graph() {
        let env = PredatorPrey::new(EnvConfig::predator_prey(10)).unwrap();
        let table = assign_types(&env).unwrap();
        let g = RelevanceGraph {
            weights: Tensor::zeros(&[3, table.cols()]),
            table,
            tick: 0,
        };
        let out = select_graph(&[g.clone()], GraphMode::Shared, 3).unwrap();
        assert!(out.iter().all(|x| *x == g));
        assert!(select_graph(&[g], GraphMode::Individual, 3).is_err());
    }
}
