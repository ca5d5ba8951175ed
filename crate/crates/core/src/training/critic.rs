use crate::actor::DecisionInput;
use crate::autodiff::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::envs::StateTensor;
use crate::error::{MagnetError, Result};
use crate::nn::{Activation, ConvPool, Mlp};
use crate::registry::Registry;

/// Presence and normalised centroid `(present, row, col)` of every channel:
/// a cheap summary of where each object kind sits on the grid.
pub fn state_features(grid: &StateTensor) -> Vec<f64> {
    let m = grid.channels();
    let mut f = Vec::with_capacity(3 * m);
    for k in 0..m {
        match grid.centroid(k) {
            Some((r, c)) => f.extend([1.0, r, c]),
            None => f.extend([0.0, 0.0, 0.0]),
        }
    }
    f
}

/// What a critic sees of one state: the global grid and each row agent's
/// pooled local features (zeros for absent agents).
#[derive(Clone, Debug, PartialEq)]
pub struct CriticSample {
    pub state: StateTensor,
    pub features: Vec<Vec<f64>>,
}

impl CriticSample {
    pub fn new(state: StateTensor, input: &DecisionInput, feature_width: usize) -> Self {
        let features = input
            .features
            .iter()
            .map(|f| f.clone().unwrap_or_else(|| vec![0.0; feature_width]))
            .collect();
        Self { state, features }
    }
}

/// One agent's entry in a centralised-critic sample: its index, its own
/// observation features and the action it took (if recorded).
#[derive(Clone, Debug, PartialEq)]
pub struct AgentEntry {
    pub agent: usize,
    pub observation: Vec<f64>,
    pub action: Option<Vec<f64>>,
}

/// All agents' entries of one transition, ordered by agent index.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    entries: Vec<AgentEntry>,
}

impl JointSample {
    /// Rejects any ordering other than agent indices `0, 1, …, N−1`.
    pub fn new(entries: Vec<AgentEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(MagnetError::Input("a joint sample needs at least one agent".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.agent != i {
                return Err(MagnetError::Contract(format!(
                    "joint samples are ordered by agent index; position {i} holds agent {}",
                    e.agent
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[AgentEntry] {
        &self.entries
    }
}

/// Input rows `[o_i ⊕ a_1 ⊕ … ⊕ a_N]` of agent `i`'s centralised critic, one
/// per sample.
pub fn maddpg_critic_inputs(batch: &[JointSample], agent: usize) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(MagnetError::Input("empty batch".into()));
    }
    let mut data = Vec::new();
    let mut width = None;
    for (b, s) in batch.iter().enumerate() {
        let own = s
            .entries
            .get(agent)
            .ok_or_else(|| MagnetError::Input(format!("sample {b} has no agent {agent}")))?;
        let start = data.len();
        data.extend_from_slice(&own.observation);
        for e in &s.entries {
            let a = e.action.as_ref().ok_or_else(|| {
                MagnetError::Input(format!("sample {b}: action of agent {} was not recorded", e.agent))
            })?;
            data.extend_from_slice(a);
        }
        let w = data.len() - start;
        if *width.get_or_insert(w) != w {
            return Err(MagnetError::Dimension(format!("sample {b} has input width {w}, expected {}", width.unwrap())));
        }
    }
    Tensor::matrix(batch.len(), width.unwrap_or(0), data)
}

/// A learned action-value function over the learning team's joint action.
pub trait CriticStrategy: std::fmt::Debug {
    fn name(&self) -> &'static str;
    /// Number of Q outputs per sample (1 for a team critic, one per agent
    /// for per-agent critics).
    fn outputs(&self) -> usize;
    /// Regression targets' rewards for one transition from per-row rewards.
    fn rewards(&self, row_rewards: &[f64]) -> Vec<f64>;
    /// Q-values `[B, outputs]` for joint actions `[B, R·a]`.
    fn q(&self, tape: &mut Tape, store: &ParamStore, samples: &[&CriticSample], joint: Var) -> Result<Var>;
    /// Scalar objective the actor ascends. `live` holds the actor's
    /// differentiable joint actions, `recorded` the replayed ones.
    fn actor_objective(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        samples: &[&CriticSample],
        live: Var,
        recorded: &Tensor,
    ) -> Result<Var>;
}

/// Dimensions shared by the critic constructors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticShape {
    pub grid: usize,
    pub channels: usize,
    pub rows: usize,
    pub action_width: usize,
    pub feature_width: usize,
}

impl CriticShape {
    pub fn joint_width(&self) -> usize {
        self.rows * self.action_width
    }
}

/// Critic layer settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticLayers {
    pub kernel: usize,
    pub filters: usize,
    pub hidden: Vec<usize>,
}

pub type CriticCtor = fn(&mut ParamStore, &str, CriticShape, &CriticLayers, &mut RngStream) -> Result<Box<dyn CriticStrategy>>;

/// Registry of critic kinds keyed by name.
pub fn critic_registry() -> Registry<CriticCtor> {
    let mut r: Registry<CriticCtor> = Registry::new("critic");
    r.register("team", |store, name, shape, layers, rng| {
        Ok(Box::new(TeamCritic::new(store, name, shape, layers, rng)?))
    });
    r.register("per-agent", |store, name, shape, layers, rng| {
        Ok(Box::new(PerAgentCritic::new(store, name, shape, layers, rng)?))
    });
    r
}

fn check_joint(tape: &Tape, joint: Var, batch: usize, width: usize) -> Result<()> {
    if tape.shape(joint) != [batch, width] {
        return Err(MagnetError::Dimension(format!(
            "critic actions {:?}, expected [{batch}, {width}]",
            tape.shape(joint)
        )));
    }
    Ok(())
}

/// Centralised Q-function of the whole team:
/// `Q(s, a_1..a_R) = MLP([conv(X) ⊕ centroid features ⊕ joint action])`,
/// trained on the mean team reward.
#[derive(Clone, Debug)]
pub struct TeamCritic {
    conv: ConvPool,
    mlp: Mlp,
    shape: CriticShape,
}

impl TeamCritic {
    pub fn new(store: &mut ParamStore, name: &str, shape: CriticShape, layers: &CriticLayers, rng: &mut RngStream) -> Result<Self> {
        if shape.grid < layers.kernel + 1 {
            return Err(MagnetError::config("model.critic_kernel", "kernel too large for the grid"));
        }
        let conv = ConvPool::new(store, &format!("{name}.conv"), layers.kernel, shape.channels, layers.filters, rng);
        let mut sizes = vec![conv.output_len(shape.grid) + 3 * shape.channels + shape.joint_width()];
        sizes.extend(&layers.hidden);
        sizes.push(1);
        let mlp = Mlp::new(store, &format!("{name}.q"), &sizes, 0.0, Activation::Linear, rng)?;
        Ok(Self { conv, mlp, shape })
    }

    fn state_row(&self, tape: &mut Tape, store: &ParamStore, grid: &StateTensor) -> Result<Var> {
        let (g, m) = (self.shape.grid, self.shape.channels);
        if grid.dims() != (g, g, m) {
            return Err(MagnetError::Dimension(format!(
                "critic expects a {g}x{g}x{m} state, got {:?}",
                grid.dims()
            )));
        }
        let x = tape.constant(grid.to_tensor());
        let conv = self.conv.forward(tape, store, x)?;
        let summary = tape.constant(Tensor::row(&state_features(grid)));
        tape.concat_cols(&[conv, summary])
    }
}

impl CriticStrategy for TeamCritic {
    fn name(&self) -> &'static str {
        "team"
    }

    fn outputs(&self) -> usize {
        1
    }

    fn rewards(&self, row_rewards: &[f64]) -> Vec<f64> {
        let n = row_rewards.len().max(1) as f64;
        vec![row_rewards.iter().sum::<f64>() / n]
    }

    fn q(&self, tape: &mut Tape, store: &ParamStore, samples: &[&CriticSample], joint: Var) -> Result<Var> {
        check_joint(tape, joint, samples.len(), self.shape.joint_width())?;
        let rows = samples
            .iter()
            .map(|s| self.state_row(tape, store, &s.state))
            .collect::<Result<Vec<_>>>()?;
        let s = tape.stack_rows(&rows)?;
        let x = tape.concat_cols(&[s, joint])?;
        self.mlp.eval(tape, store, x)
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

/// One centralised critic per row agent, `Q_i(o_i, a_1..a_R)`, each
/// trained on its own agent's reward. During the actor update agent `i`'s
/// critic only differentiates through `a_i`; teammates' actions are the
/// replayed ones.
#[derive(Clone, Debug)]
pub struct PerAgentCritic {
    nets: Vec<Mlp>,
    shape: CriticShape,
}

impl PerAgentCritic {
    pub fn new(store: &mut ParamStore, name: &str, shape: CriticShape, layers: &CriticLayers, rng: &mut RngStream) -> Result<Self> {
        let mut sizes = vec![shape.feature_width + shape.joint_width()];
        sizes.extend(&layers.hidden);
        sizes.push(1);
        let nets = (0..shape.rows)
            .map(|i| Mlp::new(store, &format!("{name}.q{i}"), &sizes, 0.0, Activation::Linear, rng))
            .collect::<Result<_>>()?;
        Ok(Self { nets, shape })
    }

    fn observations(&self, samples: &[&CriticSample], agent: usize) -> Result<Tensor> {
        let fw = self.shape.feature_width;
        let mut data = Vec::with_capacity(samples.len() * fw);
        for s in samples {
            let f = s
                .features
                .get(agent)
                .filter(|f| f.len() == fw)
                .ok_or_else(|| MagnetError::Input(format!("critic sample lacks features of row {agent}")))?;
            data.extend_from_slice(f);
        }
        Tensor::matrix(samples.len(), fw, data)
    }

    fn agent_q(&self, tape: &mut Tape, store: &ParamStore, samples: &[&CriticSample], agent: usize, joint: Var) -> Result<Var> {
        let o = tape.constant(self.observations(samples, agent)?);
        let x = tape.concat_cols(&[o, joint])?;
        self.nets[agent].eval(tape, store, x)
    }
}

impl CriticStrategy for PerAgentCritic {
    fn name(&self) -> &'static str {
        "per-agent"
    }

    fn outputs(&self) -> usize {
        self.shape.rows
    }

    fn rewards(&self, row_rewards: &[f64]) -> Vec<f64> {
        row_rewards.to_vec()
    }

    fn q(&self, tape: &mut Tape, store: &ParamStore, samples: &[&CriticSample], joint: Var) -> Result<Var> {
        check_joint(tape, joint, samples.len(), self.shape.joint_width())?;
        let qs = (0..self.shape.rows)
            .map(|i| self.agent_q(tape, store, samples, i, joint))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&qs)
    }

    fn actor_objective(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        samples: &[&CriticSample],
        live: Var,
        recorded: &Tensor,
    ) -> Result<Var> {
        let w = self.shape.action_width;
        check_joint(tape, live, samples.len(), self.shape.joint_width())?;
        if recorded.shape() != tape.shape(live) {
            return Err(MagnetError::Dimension("recorded joint action shape differs from the live one".into()));
        }
        let rec = tape.constant(recorded.clone());
        let mut total = None;
        for i in 0..self.shape.rows {
            let mut parts = Vec::with_capacity(self.shape.rows);
            for r in 0..self.shape.rows {
                let src = if r == i { live } else { rec };
                parts.push(tape.slice_cols(src, r * w, w)?);
            }
            let joint = tape.concat_cols(&parts)?;
            let q = self.agent_q(tape, store, samples, i, joint)?;
            let m = tape.mean(q);
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m)?,
            });
        }
        let total = total.ok_or_else(|| MagnetError::Input("critic has no agents".into()))?;
        Ok(tape.scale(total, 1.0 / self.shape.rows as f64))
    }
}
