use std::rc::Rc;

use super::{count_message_round, ActorConfig, ActorOutput, ActorShape, DecisionInput, DecisionModule};
use crate::autodiff::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::envs::ActionSpace;
use crate::error::{MagnetError, Result};
use crate::nn::{Activation, LstmCell, Mlp};

/// One parameter set per vertex type (init, update) and per edge type
/// (message), plus the team's decision head.
#[derive(Clone, Debug)]
pub struct TypedNetBank {
    pub init: Vec<Mlp>,
    pub message: Vec<Mlp>,
    pub update: Vec<LstmCell>,
    pub choice: Mlp,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(hidden);
    s.push(output);
    s
}

impl TypedNetBank {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ActorConfig, shape: &ActorShape, rng: &mut RngStream) -> Result<Self> {
        let h = cfg.hidden;
        let nv = shape.schema.num_vertex_types();
        let ne = shape.schema.num_edge_types();
        let init = (0..nv)
            .map(|b| {
                Mlp::new(
                    store,
                    &format!("{name}.init{b}"),
                    &sizes(shape.obs_width, &cfg.init_hidden, h),
                    0.0,
                    Activation::Linear,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let message = (0..ne)
            .map(|c| {
                Mlp::new(
                    store,
                    &format!("{name}.msg{c}"),
                    &sizes(h, &cfg.message_hidden, h),
                    0.0,
                    Activation::Linear,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let update = (0..nv)
            .map(|b| LstmCell::new(store, &format!("{name}.up{b}"), h, h, rng))
            .collect();
        let out_act = match shape.action_space {
            ActionSpace::Continuous => Activation::Tanh,
            ActionSpace::Discrete => Activation::Linear,
        };
        let choice = Mlp::new(
            store,
            &format!("{name}.choice"),
            &sizes(h + shape.feature_width, &cfg.choice_hidden, shape.head_width()),
            0.0,
            out_act,
            rng,
        )?;
        Ok(Self {
            init,
            message,
            update,
            choice,
        })
    }
}

/// Present vertices of one decision in column order, grouped by type,
/// with the per-edge-type adjacency matrices built from the graph.
pub struct Prepared {
    /// Column of the k-th present vertex.
    pub columns: Vec<usize>,
    pub types: Vec<usize>,
    groups: Vec<(usize, Vec<usize>)>,
    /// Position of vertex k in the grouped order.
    grouped_pos: Vec<usize>,
    /// `A_c[u][v]` weights the message `v → u`.
    pub adjacency: Vec<(usize, Var)>,
}

impl Prepared {
    pub fn index_of(&self, column: usize) -> Option<usize> {
        self.columns.iter().position(|c| *c == column)
    }

    fn rows_of(&self, tape: &mut Tape, x: Var, ks: &[usize]) -> Result<Var> {
        let (_, w) = tape.value(x).dims2();
        let idx: Vec<usize> = ks.iter().flat_map(|k| k * w..(k + 1) * w).collect();
        tape.gather(x, Rc::new(idx), vec![ks.len(), w])
    }

    /// Reassembles per-group outputs (in group order) into vertex order.
    fn ungroup(&self, tape: &mut Tape, parts: &[Var], width: usize) -> Result<Var> {
        let n = self.columns.len();
        let flat = tape.concat(parts);
        let idx: Vec<usize> = (0..n)
            .flat_map(|k| {
                let p = self.grouped_pos[k];
                p * width..(p + 1) * width
            })
            .collect();
        tape.gather(flat, Rc::new(idx), vec![n, width])
    }
}

/// Graph entry weighting the message `from → to` (both columns), if any.
fn entry(rows: usize, cols: usize, from: usize, to: usize) -> Option<usize> {
    if from == to {
        None
    } else if from < rows {
        Some(from * cols + to)
    } else if to < rows {
        Some(to * cols + from)
    } else {
        None
    }
}

/// Message-passing decision module.
#[derive(Clone, Debug)]
pub struct MessagePassing {
    pub shape: ActorShape,
    pub bank: TypedNetBank,
    pub hidden: usize,
    pub iterations: usize,
}

impl MessagePassing {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ActorConfig, shape: ActorShape, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            bank: TypedNetBank::new(store, name, cfg, &shape, rng)?,
            shape,
            hidden: cfg.hidden,
            iterations: cfg.mp_iterations,
        })
    }

    pub fn prepare(&self, tape: &mut Tape, input: &DecisionInput, graph: Var) -> Result<Prepared> {
        input.check(&self.shape)?;
        let (r, c) = (self.shape.rows, self.shape.cols);
        if tape.shape(graph) != [r, c] {
            return Err(MagnetError::Consistency(format!(
                "graph {:?} does not match a {r}x{c} actor",
                tape.shape(graph)
            )));
        }
        let present: Vec<_> = input.table.present().cloned().collect();
        if present.is_empty() {
            return Err(MagnetError::Input("no vertices present".into()));
        }
        let columns: Vec<usize> = present.iter().map(|v| v.column).collect();
        let types: Vec<usize> = present.iter().map(|v| v.vertex_type).collect();
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (k, b) in types.iter().enumerate() {
            match groups.iter_mut().find(|(t, _)| t == b) {
                Some((_, ks)) => ks.push(k),
                None => groups.push((*b, vec![k])),
            }
        }
        let mut grouped_pos = vec![0; columns.len()];
        for (p, k) in groups.iter().flat_map(|(_, ks)| ks.iter()).enumerate() {
            grouped_pos[*k] = p;
        }

        let n = columns.len();
        let zero_slot = r * c;
        let flat = tape.reshape(graph, vec![1, r * c])?;
        let zero = tape.constant(Tensor::zeros(&[1, 1]));
        let ext = tape.concat(&[flat, zero]);
        let schema = self.shape.schema;
        let mut adjacency = Vec::new();
        for et in 0..schema.num_edge_types() {
            let mut idx = vec![zero_slot; n * n];
            let mut any = false;
            for u in 0..n {
                for v in 0..n {
                    if schema.edge_type(types[v], types[u]) != et {
                        continue;
                    }
                    if let Some(e) = entry(r, c, columns[v], columns[u]) {
                        idx[u * n + v] = e;
                        any = true;
                    }
                }
            }
            if any {
                let a = tape.gather(ext, Rc::new(idx), vec![n, n])?;
                adjacency.push((et, a));
            }
        }
        Ok(Prepared {
            columns,
            types,
            groups,
            grouped_pos,
            adjacency,
        })
    }

    /// `μ⁰_v = MLP_init^{b(v)}(O_v)` for every present vertex, `[n, H]`.
    pub fn init_info(&self, tape: &mut Tape, store: &ParamStore, input: &DecisionInput, prep: &Prepared) -> Result<Var> {
        let w = self.shape.obs_width;
        let mut parts = Vec::with_capacity(prep.groups.len());
        for (b, ks) in &prep.groups {
            let mut data = Vec::with_capacity(ks.len() * w);
            for k in ks {
                let obs = input.observations[prep.columns[*k]]
                    .as_ref()
                    .ok_or_else(|| MagnetError::Input(format!("column {} has no observation", prep.columns[*k])))?;
                data.extend_from_slice(obs);
            }
            let x = tape.constant(Tensor::matrix(ks.len(), w, data)?);
            parts.push(self.bank.init[*b].eval(tape, store, x)?);
        }
        prep.ungroup(tape, &parts, self.hidden)
    }

    /// Sum of incoming messages per vertex, `[n, H]`.
    pub fn incoming(&self, tape: &mut Tape, store: &ParamStore, prep: &Prepared, mu: Var) -> Result<Var> {
        let n = prep.columns.len();
        let mut total: Option<Var> = None;
        for (et, a) in &prep.adjacency {
            let m = self.bank.message[*et].eval(tape, store, mu)?;
            let s = tape.matmul(*a, m)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        Ok(match total {
            Some(t) => t,
            None => tape.constant(Tensor::zeros(&[n, self.hidden])),
        })
    }

    /// One round: messages, then the typed LSTM update. Returns `(μ', cell')`.
    pub fn message_round(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prep: &Prepared,
        mu: Var,
        cell: Var,
    ) -> Result<(Var, Var)> {
        count_message_round();
        let x = self.incoming(tape, store, prep, mu)?;
        let mut hs = Vec::with_capacity(prep.groups.len());
        let mut cs = Vec::with_capacity(prep.groups.len());
        for (b, ks) in &prep.groups {
            let hb = prep.rows_of(tape, mu, ks)?;
            let cb = prep.rows_of(tape, cell, ks)?;
            let xb = prep.rows_of(tape, x, ks)?;
            let (h2, c2) = self.bank.update[*b].step(tape, store, hb, cb, xb)?;
            hs.push(h2);
            cs.push(c2);
        }
        let h = prep.ungroup(tape, &hs, self.hidden)?;
        let c = prep.ungroup(tape, &cs, self.hidden)?;
        Ok((h, c))
    }

    /// Decision heads for the row agents from the final information vectors.
    pub fn choose(&self, tape: &mut Tape, store: &ParamStore, input: &DecisionInput, prep: &Prepared, mu: Var) -> Result<Vec<Option<Var>>> {
        let mut heads = Vec::with_capacity(self.shape.rows);
        for r in 0..self.shape.rows {
            let (Some(k), Some(f)) = (prep.index_of(r), input.features[r].as_ref()) else {
                heads.push(None);
                continue;
            };
            let m = tape.row(mu, k)?;
            let f = tape.constant(Tensor::row(f));
            let x = tape.concat_cols(&[m, f])?;
            heads.push(Some(self.bank.choice.eval(tape, store, x)?));
        }
        Ok(heads)
    }
}

impl DecisionModule for MessagePassing {
    fn name(&self) -> &'static str {
        "message-passing"
    }

    fn shape(&self) -> &ActorShape {
        &self.shape
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: &DecisionInput, graph: Var) -> Result<ActorOutput> {
        let prep = self.prepare(tape, input, graph)?;
        let mut mu = self.init_info(tape, store, input, &prep)?;
        let mut cell = tape.constant(Tensor::zeros(&[prep.columns.len(), self.hidden]));
        for _ in 0..self.iterations {
            (mu, cell) = self.message_round(tape, store, &prep, mu, cell)?;
        }
        let heads = self.choose(tape, store, input, &prep, mu)?;
        Ok(ActorOutput { heads, mu: Some(mu) })
    }
}

/// Individual messages `w_(v,u) · MLP^{c(v,u)}(μ_v)` as `(from, to, [1, H])`
/// column pairs, for inspection; the forward pass uses the matrix form.
pub fn edge_messages(
    module: &MessagePassing,
    tape: &mut Tape,
    store: &ParamStore,
    prep: &Prepared,
    graph: Var,
    mu: Var,
) -> Result<Vec<(usize, usize, Var)>> {
    let (r, c) = (module.shape.rows, module.shape.cols);
    let flat = tape.reshape(graph, vec![1, r * c])?;
    let n = prep.columns.len();
    let mut out = Vec::new();
    for v in 0..n {
        for u in 0..n {
            let Some(e) = entry(r, c, prep.columns[v], prep.columns[u]) else { continue };
            let et = module.shape.schema.edge_type(prep.types[v], prep.types[u]);
            let mv = tape.row(mu, v)?;
            let m = module.bank.message[et].eval(tape, store, mv)?;
            let w = tape.element(flat, e)?;
            out.push((prep.columns[v], prep.columns[u], tape.scale_by(m, w)?));
        }
    }
    Ok(out)
}
