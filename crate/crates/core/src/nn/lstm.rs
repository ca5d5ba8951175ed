use crate::autodiff::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{MagnetError, Result};

use super::glorot;

/// Single LSTM cell. Gate columns are laid out as `[input, forget, candidate, output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let g = 4 * hidden;
        let w_input = store.add(format!("{name}.wx"), glorot(&[input, g], input, hidden, rng));
        let w_hidden = store.add(format!("{name}.wh"), glorot(&[hidden, g], hidden, hidden, rng));
        let mut b = Tensor::zeros(&[g]);
        // forget-gate bias starts at 1
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let bias = store.add(format!("{name}.b"), b);
        Self {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        }
    }

    /// One step over a batch of rows. Returns `(hidden', cell')`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, cell: Var, x: Var) -> Result<(Var, Var)> {
        let (m, hw) = tape.value(hidden).dims2();
        let (cm, cw) = tape.value(cell).dims2();
        let (xm, xw) = tape.value(x).dims2();
        if hw != self.hidden || cw != self.hidden || xw != self.input || cm != m || xm != m {
            return Err(MagnetError::Dimension(format!(
                "lstm cell ({} in, {} hidden) got hidden {:?}, cell {:?}, input {:?}",
                self.input,
                self.hidden,
                tape.shape(hidden),
                tape.shape(cell),
                tape.shape(x)
            )));
        }
        let wx = tape.param(store, self.w_input);
        let wh = tape.param(store, self.w_hidden);
        let b = tape.param(store, self.bias);
        let gx = tape.matmul(x, wx)?;
        let gh = tape.matmul(hidden, wh)?;
        let gates = tape.add(gx, gh)?;
        let gates = tape.add_row(gates, b)?;
        let h = self.hidden;
        let i_pre = tape.slice_cols(gates, 0, h)?;
        let f_pre = tape.slice_cols(gates, h, h)?;
        let g_pre = tape.slice_cols(gates, 2 * h, h)?;
        let o_pre = tape.slice_cols(gates, 3 * h, h)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let c_act = tape.tanh(c_next);
        let h_next = tape.mul(o, c_act)?;
        Ok((h_next, c_next))
    }
}
