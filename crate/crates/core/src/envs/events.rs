use serde::{Deserialize, Serialize};

/// Stable identity of a graph vertex inside one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexId {
    Agent(usize),
    Prey(usize),
    /// Obstacle or wall, indexed in map scan order at reset.
    Wall(usize),
    /// Bomb slot, assigned in placement order.
    Bomb(usize),
    /// Item slot, assigned in spawn order.
    Item(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    KillEnemyAgent,
    PickUpExtraBomb,
    PickUpBlastPower,
    KillPrey,
    WoundPrey,
}

impl EventKind {
    /// Event weight `s(ξ)` on the raw scale (before normalisation).
    pub fn weight(self) -> f64 {
        match self {
            EventKind::KillEnemyAgent => 100.0,
            EventKind::PickUpExtraBomb => 25.0,
            EventKind::PickUpBlastPower => 25.0,
            EventKind::KillPrey => 100.0,
            EventKind::WoundPrey => 50.0,
        }
    }
}

/// Something that happened on the edge `(source, target)` during one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub source: VertexId,
    pub target: VertexId,
    pub weight: f64,
}

impl Event {
    pub fn new(kind: EventKind, source: VertexId, target: VertexId) -> Self {
        Self {
            kind,
            source,
            target,
            weight: kind.weight(),
        }
    }
}
