use crate::autodiff::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{MagnetError, Result};

use super::{glorot, Dense};

const LN_EPS: f64 = 1e-9;

/// One post-norm transformer encoder block: multi-head scaled dot-product
/// attention, residual + layer norm, position-wise feed-forward, residual +
/// layer norm.
#[derive(Clone, Debug)]
pub struct SelfAttentionEncoder {
    pub width: usize,
    pub heads: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff1: Dense,
    ff2: Dense,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head `[n, n]` attention weight matrices.
    pub weights: Vec<Var>,
}

impl SelfAttentionEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if width == 0 || heads == 0 || width % heads != 0 {
            return Err(MagnetError::Input(format!(
                "attention width {width} must be a positive multiple of {heads} heads"
            )));
        }
        let mut sq = |suffix: &str, store: &mut ParamStore| {
            store.add(format!("{name}.{suffix}"), glorot(&[width, width], width, width, rng))
        };
        let wq = sq("wq", store);
        let wk = sq("wk", store);
        let wv = sq("wv", store);
        let wo = sq("wo", store);
        let ln1_gain = store.add(format!("{name}.ln1.g"), Tensor::filled(&[width], 1.0));
        let ln1_bias = store.add(format!("{name}.ln1.b"), Tensor::zeros(&[width]));
        let ff1 = Dense::new(store, &format!("{name}.ff1"), width, ff, rng);
        let ff2 = Dense::new(store, &format!("{name}.ff2"), ff, width, rng);
        let ln2_gain = store.add(format!("{name}.ln2.g"), Tensor::filled(&[width], 1.0));
        let ln2_bias = store.add(format!("{name}.ln2.b"), Tensor::zeros(&[width]));
        Ok(Self {
            width,
            heads,
            wq,
            wk,
            wv,
            wo,
            ln1_gain,
            ln1_bias,
            ff1,
            ff2,
            ln2_gain,
            ln2_bias,
        })
    }

    /// Encodes a `[n, width]` sequence.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<AttentionOutput> {
        let (n, d) = tape.value(seq).dims2();
        if n == 0 || tape.value(seq).is_empty() {
            return Err(MagnetError::Input("self-attention over an empty sequence".into()));
        }
        if d != self.width {
            return Err(MagnetError::Dimension(format!(
                "sequence width {d}, encoder width {}",
                self.width
            )));
        }
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);
        let q = tape.matmul(seq, wq)?;
        let k = tape.matmul(seq, wk)?;
        let v = tape.matmul(seq, wv)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            weights.push(attn);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let projected = tape.matmul(merged, wo)?;
        let res1 = tape.add(seq, projected)?;
        let x1 = self.norm(tape, store, res1, self.ln1_gain, self.ln1_bias)?;
        let hidden = self.ff1.forward(tape, store, x1)?;
        let hidden = tape.relu(hidden);
        let ff = self.ff2.forward(tape, store, hidden)?;
        let res2 = tape.add(x1, ff)?;
        let output = self.norm(tape, store, res2, self.ln2_gain, self.ln2_bias)?;
        Ok(AttentionOutput { output, weights })
    }

    fn norm(&self, tape: &mut Tape, store: &ParamStore, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let normed = tape.layer_norm_rows(x, LN_EPS);
        let g = tape.param(store, gain);
        let b = tape.param(store, bias);
        let scaled = tape.mul_row(normed, g)?;
        tape.add_row(scaled, b)
    }

    /// Convenience wrapper over a list of `[1, width]` tokens.
    pub fn encode_list(&self, tape: &mut Tape, store: &ParamStore, tokens: &[Var]) -> Result<Vec<Var>> {
        if tokens.is_empty() {
            return Err(MagnetError::Input("self-attention over an empty sequence".into()));
        }
        let seq = tape.stack_rows(tokens)?;
        let out = self.forward(tape, store, seq)?;
        (0..tokens.len()).map(|i| tape.row(out.output, i)).collect()
    }
}
