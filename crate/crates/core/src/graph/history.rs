use std::collections::VecDeque;

use crate::autodiff::{RngStream, Tensor};
use crate::envs::StateTensor;
use crate::error::{MagnetError, Result};

/// Everything the GGN sees at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GgnInput {
    /// `X(t), X(t−1), X(t−2)`.
    pub states: [StateTensor; 3],
    /// Row agents' action encodings at `t−1` and `t−2`, concatenated per slot.
    pub actions: [Vec<f64>; 2],
    /// `graph(t−1)`, `[R, C]`; treated as a constant.
    pub prev_graph: Tensor,
}

/// Rolling window of the last three states, two joint actions and the last
/// graph of one episode.
#[derive(Clone, Debug)]
pub struct GraphHistory {
    states: VecDeque<StateTensor>,
    actions: VecDeque<Vec<f64>>,
    graph: Option<Tensor>,
    rows: usize,
    cols: usize,
    action_width: usize,
    rng: RngStream,
}

impl GraphHistory {
    /// `action_width` is the width of one joint action encoding
    /// (rows × per-agent width). `rng` seeds the random initial graph.
    pub fn new(rows: usize, cols: usize, action_width: usize, rng: RngStream) -> Self {
        Self {
            states: VecDeque::with_capacity(3),
            actions: VecDeque::with_capacity(2),
            graph: None,
            rows,
            cols,
            action_width,
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push_state(&mut self, s: StateTensor) {
        if self.states.len() == 3 {
            self.states.pop_back();
        }
        self.states.push_front(s);
    }

    /// Records the joint action taken from the most recent state.
    pub fn push_action(&mut self, a: Vec<f64>) -> Result<()> {
        if a.len() != self.action_width {
            return Err(MagnetError::Dimension(format!(
                "joint action width {} vs expected {}",
                a.len(),
                self.action_width
            )));
        }
        if self.actions.len() == 2 {
            self.actions.pop_back();
        }
        self.actions.push_front(a);
        Ok(())
    }

    pub fn set_graph(&mut self, g: Tensor) {
        self.graph = Some(g);
    }

    pub fn graph(&self) -> Option<&Tensor> {
        self.graph.as_ref()
    }

    /// Previous graph, drawing the random `U[-0.1, 0.1]` start graph on first use.
    pub fn prev_graph(&mut self) -> Tensor {
        if self.graph.is_none() {
            let n = self.rows * self.cols;
            let data = (0..n).map(|_| self.rng.uniform_range(-0.1, 0.1)).collect();
            self.graph = Some(Tensor::new(vec![self.rows, self.cols], data).expect("graph shape"));
        }
        self.graph.clone().expect("graph set above")
    }
}

/// Assembles the GGN input, extending missing history by repeating the
/// oldest state and using zero actions.
pub fn build_ggn_input(history: &mut GraphHistory) -> Result<GgnInput> {
    let newest = history
        .states
        .front()
        .ok_or_else(|| MagnetError::Input("GGN input needs at least one state".into()))?
        .clone();
    let get = |i: usize| history.states.get(i).or(history.states.back()).cloned().unwrap_or_else(|| newest.clone());
    let states = [newest.clone(), get(1), get(2)];
    let act = |i: usize| {
        history
            .actions
            .get(i)
            .cloned()
            .unwrap_or_else(|| vec![0.0; history.action_width])
    };
    let actions = [act(0), act(1)];
    Ok(GgnInput {
        states,
        actions,
        prev_graph: history.prev_graph(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(k: usize) -> StateTensor {
        let mut s = StateTensor::new(8, 4);
        s.set((k, k), 0);
        s
    }

    #[test]
    fn start_of_episode_rule() {
        let mut h = GraphHistory::new(2, 3, 4, RngStream::new(1, "g"));
        assert!(build_ggn_input(&mut h).is_err());
        h.push_state(st(0));
        let inp = build_ggn_input(&mut h).unwrap();
        assert!(inp.states.iter().all(|s| *s == st(0)));
        assert!(inp.actions.iter().all(|a| a.iter().all(|x| *x == 0.0)));
        assert!(inp.prev_graph.data().iter().all(|x| x.abs() <= 0.1));
        assert!(inp.prev_graph.max_abs() > 0.0);

        h.push_action(vec![1.0; 4]).unwrap();
        h.push_state(st(1));
        let inp = build_ggn_input(&mut h).unwrap();
        assert_eq!(inp.states, [st(1), st(0), st(0)]);
        assert_eq!(inp.actions, [vec![1.0; 4], vec![0.0; 4]]);

        h.push_action(vec![2.0; 4]).unwrap();
        h.push_state(st(2));
        h.push_action(vec![3.0; 4]).unwrap();
        h.push_state(st(3));
        let inp = build_ggn_input(&mut h).unwrap();
        assert_eq!(inp.states, [st(3), st(2), st(1)]);
        assert_eq!(inp.actions, [vec![3.0; 4], vec![2.0; 4]]);
        assert!(h.push_action(vec![0.0; 3]).is_err());
    }
}
