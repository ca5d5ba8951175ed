//! The graph generation network.
//!
//! Pipeline: conv+pool each of the three states → zero-pad every source
//! vector (three state features, two action encodings, previous graph) to a
//! common width → a shared fully connected layer per source token → core
//! (MLP over the concatenated tokens, or one self-attention block over them)
//! → two-layer fully connected head with dropout → tanh → `[R, C]` → mask.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{GgnInput, RelevanceGraph, VertexTable};
use crate::autodiff::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{MagnetError, Result};
use crate::nn::{Activation, ConvPool, Dense, Mlp, SelfAttentionEncoder};
use crate::registry::Registry;

const TOKENS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GgnConfig {
    /// Registered core name: `mlp` or `self-attention`.
    pub core: String,
    pub kernel: usize,
    pub filters: usize,
    /// Width of each projected source token.
    pub token_width: usize,
    /// Hidden sizes of the MLP core.
    pub mlp_sizes: Vec<usize>,
    pub heads: usize,
    pub attention_ff: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for GgnConfig {
    fn default() -> Self {
        Self {
            core: "self-attention".into(),
            kernel: 5,
            filters: 4,
            token_width: 32,
            mlp_sizes: vec![128, 32, 32],
            heads: 2,
            attention_ff: 64,
            head_hidden: 64,
            dropout: 0.0,
        }
    }
}

/// Maps the `[6, token_width]` token matrix to one feature row.
pub trait GgnCore: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn output_width(&self) -> usize;
    fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, rng: &mut RngStream, train: bool) -> Result<Var>;
}

pub type GgnCoreCtor = fn(&mut ParamStore, &str, &GgnConfig, &mut RngStream) -> Result<Box<dyn GgnCore>>;

#[derive(Debug)]
pub struct MlpCore {
    mlp: Mlp,
}

impl GgnCore for MlpCore {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn output_width(&self) -> usize {
        self.mlp.output_width()
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, rng: &mut RngStream, train: bool) -> Result<Var> {
        let n = tape.value(tokens).len();
        let flat = tape.reshape(tokens, vec![1, n])?;
        let y = self.mlp.forward(tape, store, flat, rng, train)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug)]
pub struct SelfAttentionCore {
    encoder: SelfAttentionEncoder,
}

impl GgnCore for SelfAttentionCore {
    fn name(&self) -> &'static str {
        "self-attention"
    }

    fn output_width(&self) -> usize {
        TOKENS * self.encoder.width
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, _rng: &mut RngStream, _train: bool) -> Result<Var> {
        let out = self.encoder.forward(tape, store, tokens)?.output;
        let n = tape.value(out).len();
        tape.reshape(out, vec![1, n])
    }
}

/// Registry of GGN cores keyed by name.
pub fn ggn_core_registry() -> Registry<GgnCoreCtor> {
    let mut r: Registry<GgnCoreCtor> = Registry::new("GGN core");
    r.register("mlp", |store, name, cfg, rng| {
        let mut sizes = vec![TOKENS * cfg.token_width];
        sizes.extend(&cfg.mlp_sizes);
        Ok(Box::new(MlpCore {
            mlp: Mlp::new(store, name, &sizes, 0.0, Activation::Linear, rng)?,
        }))
    });
    r.register("self-attention", |store, name, cfg, rng| {
        Ok(Box::new(SelfAttentionCore {
            encoder: SelfAttentionEncoder::new(store, name, cfg.token_width, cfg.heads, cfg.attention_ff, rng)?,
        }))
    });
    r
}

/// One graph generation network. Its parameters live in the caller's store
/// under `name`.
#[derive(Debug)]
pub struct Ggn {
    pub config: GgnConfig,
    conv: ConvPool,
    token_fc: Dense,
    core: Box<dyn GgnCore>,
    head: Mlp,
    grid: usize,
    channels: usize,
    rows: usize,
    cols: usize,
    action_width: usize,
    pad_width: usize,
}

impl Ggn {
    /// `action_width` is the joint (all rows) action encoding width.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &GgnConfig,
        grid: usize,
        channels: usize,
        rows: usize,
        cols: usize,
        action_width: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if grid < config.kernel + 1 {
            return Err(MagnetError::Input(format!(
                "grid {grid} too small for a {}x{} kernel",
                config.kernel, config.kernel
            )));
        }
        let conv = ConvPool::new(store, &format!("{name}.conv"), config.kernel, channels, config.filters, rng);
        let pad_width = conv.output_len(grid).max(action_width).max(rows * cols);
        let token_fc = Dense::new(store, &format!("{name}.token"), pad_width, config.token_width, rng);
        let ctor = ggn_core_registry().get(&config.core)?;
        let core = ctor(store, &format!("{name}.core"), config, rng)?;
        let head = Mlp::new(
            store,
            &format!("{name}.head"),
            &[core.output_width(), config.head_hidden, rows * cols],
            config.dropout,
            Activation::Tanh,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            conv,
            token_fc,
            core,
            head,
            grid,
            channels,
            rows,
            cols,
            action_width,
            pad_width,
        })
    }

    pub fn core_name(&self) -> &'static str {
        self.core.name()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn padded(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        let w = tape.value(v).len();
        let row = tape.reshape(v, vec![1, w])?;
        if w == self.pad_width {
            return Ok(row);
        }
        let zeros = tape.constant(Tensor::zeros(&[1, self.pad_width - w]));
        tape.concat_cols(&[row, zeros])
    }

    /// Differentiable forward pass returning the masked `[R, C]` weights.
    /// `mask` is the row-major mask from [`VertexTable::mask`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &GgnInput,
        mask: &[f64],
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        let (r, c) = (self.rows, self.cols);
        if mask.len() != r * c {
            return Err(MagnetError::Dimension(format!("GGN mask has {} entries, expected {}", mask.len(), r * c)));
        }
        if input.prev_graph.shape() != [r, c] {
            return Err(MagnetError::Dimension(format!(
                "GGN previous graph {:?}, expected [{r}, {c}]",
                input.prev_graph.shape()
            )));
        }
        let mut tokens = Vec::with_capacity(TOKENS);
        for s in &input.states {
            if s.dims() != (self.grid, self.grid, self.channels) {
                return Err(MagnetError::Dimension(format!(
                    "GGN state {:?}, expected ({g}, {g}, {m})",
                    s.dims(),
                    g = self.grid,
                    m = self.channels
                )));
            }
            let x = tape.constant(s.to_tensor());
            let f = self.conv.forward(tape, store, x)?;
            tokens.push(self.padded(tape, f)?);
        }
        for a in &input.actions {
            if a.len() != self.action_width {
                return Err(MagnetError::Dimension(format!(
                    "GGN action encoding width {}, expected {}",
                    a.len(),
                    self.action_width
                )));
            }
            let x = tape.constant(Tensor::row(a));
            tokens.push(self.padded(tape, x)?);
        }
        let g = tape.constant(input.prev_graph.clone());
        tokens.push(self.padded(tape, g)?);
        let stacked = tape.stack_rows(&tokens)?;
        let projected = self.token_fc.forward(tape, store, stacked)?;
        let projected = tape.relu(projected);
        let features = self.core.forward(tape, store, projected, rng, train)?;
        let flat = self.head.forward(tape, store, features, rng, train)?;
        let masked = tape.mul_const(flat, Rc::new(mask.to_vec()))?;
        tape.reshape(masked, vec![r, c])
    }

    /// Inference-only graph generation.
    pub fn generate(&self, store: &ParamStore, input: &GgnInput, table: &VertexTable, tick: u64) -> Result<RelevanceGraph> {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0, "ggn/eval");
        let w = self.forward(&mut tape, store, input, &table.mask(), &mut rng, false)?;
        Ok(RelevanceGraph {
            weights: tape.value(w).clone(),
            table: table.clone(),
            tick,
        })
    }
}
