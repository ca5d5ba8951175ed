use super::{ActorConfig, ActorOutput, ActorShape, DecisionInput, DecisionModule};
use crate::autodiff::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::envs::ActionSpace;
use crate::error::Result;
use crate::nn::{Activation, Mlp};

/// Plain MLP decision module: the flattened graph and the agent's pooled
/// local features go straight into one network per team, no messaging.
#[derive(Clone, Debug)]
pub struct MlpDecision {
    pub shape: ActorShape,
    pub net: Mlp,
}

impl MlpDecision {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ActorConfig, shape: ActorShape, rng: &mut RngStream) -> Result<Self> {
        let mut sizes = vec![shape.rows * shape.cols + shape.feature_width];
        sizes.extend(&cfg.fallback_hidden);
        sizes.push(shape.head_width());
        let act = match shape.action_space {
            ActionSpace::Continuous => Activation::Tanh,
            ActionSpace::Discrete => Activation::Linear,
        };
        Ok(Self {
            net: Mlp::new(store, &format!("{name}.mlp"), &sizes, 0.0, act, rng)?,
            shape,
        })
    }
}

impl DecisionModule for MlpDecision {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn shape(&self) -> &ActorShape {
        &self.shape
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: &DecisionInput, graph: Var) -> Result<ActorOutput> {
        input.check(&self.shape)?;
        let n = self.shape.rows * self.shape.cols;
        let flat = tape.reshape(graph, vec![1, n])?;
        let mut heads = Vec::with_capacity(self.shape.rows);
        for r in 0..self.shape.rows {
            let Some(f) = input.features[r].as_ref().filter(|_| input.table.is_present(r)) else {
                heads.push(None);
                continue;
            };
            let f = tape.constant(Tensor::row(f));
            let x = tape.concat_cols(&[flat, f])?;
            heads.push(Some(self.net.eval(tape, store, x)?));
        }
        Ok(ActorOutput { heads, mu: None })
    }
}
