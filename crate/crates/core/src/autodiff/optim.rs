use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{MagnetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub hyper: OptimizerHyper,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: OptimizerHyper) -> Self {
        Self {
            kind,
            hyper,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(
            OptimizerKind::Sgd,
            OptimizerHyper {
                lr,
                ..Default::default()
            },
        )
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(
            OptimizerKind::Adam,
            OptimizerHyper {
                lr,
                ..Default::default()
            },
        )
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients stored in `store`. If any
    /// gradient is non-finite nothing is modified and the offending parameter
    /// is named in the error.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(MagnetError::Numeric {
                name: p.name.clone(),
                detail: "non-finite gradient".into(),
            });
        }
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let h = self.hyper;
        match self.kind {
            OptimizerKind::Sgd => {
                for id in store.ids().collect::<Vec<_>>() {
                    let p = store.get_mut(id);
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= h.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - h.beta1.powi(t);
                let c2 = 1.0 - h.beta2.powi(t);
                for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                    let p = store.get_mut(id);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (k, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                        m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
                        v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
                        let mh = if c1 > 0.0 { m[k] / c1 } else { m[k] };
                        let vh = if c2 > 0.0 { v[k] / c2 } else { v[k] };
                        let denom = vh.sqrt() + h.eps;
                        if denom > 0.0 {
                            *w -= h.lr * mh / denom;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v));
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn sgd_single_step() {
        let mut s = one_param(1.0, 2.0);
        Optimizer::sgd(0.1).step(&mut s).unwrap();
        assert!((s.flat_values()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_grads_are_a_fixed_point() {
        for mut opt in [Optimizer::sgd(0.1), Optimizer::adam(0.1)] {
            let mut s = one_param(1.5, 0.0);
            for _ in 0..5 {
                opt.step(&mut s).unwrap();
            }
            assert_eq!(s.flat_values()[0], 1.5);
        }
    }

    #[test]
    fn adam_step_matches_closed_form() {
        // Constant gradient g: m̂_t = g and v̂_t = g² exactly, so every step is
        // lr·g/(|g| + eps).
        let (lr, g) = (0.01, 0.3);
        let mut s = one_param(0.0, g);
        let mut opt = Optimizer::adam(lr);
        let mut prev = 0.0;
        for t in 1..=200 {
            opt.step(&mut s).unwrap();
            let w = s.flat_values()[0];
            let expected_step = lr * g / (g + 1e-8);
            assert!(((prev - w) - expected_step).abs() < 1e-12, "step {t}");
            prev = w;
        }
        assert!(((prev.abs() / 200.0) - lr).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = one_param(1.0, f64::NAN);
        let err = Optimizer::adam(0.1).step(&mut s).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(s.flat_values()[0], 1.0);
    }
}
