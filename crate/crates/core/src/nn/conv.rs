use crate::autodiff::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{MagnetError, Result};

use super::glorot;

/// Valid convolution, ReLU, 2x2 max-pool, flatten.
#[derive(Clone, Debug)]
pub struct ConvPool {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
    pub channels: usize,
    pub filters: usize,
}

impl ConvPool {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel_size: usize,
        channels: usize,
        filters: usize,
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = kernel_size * kernel_size * channels;
        let kernel = store.add(
            format!("{name}.k"),
            glorot(&[kernel_size, kernel_size, channels, filters], fan_in, filters, rng),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[filters]));
        Self {
            kernel,
            bias,
            kernel_size,
            channels,
            filters,
        }
    }

    /// Number of features produced for a `d x d` grid.
    pub fn output_len(&self, d: usize) -> usize {
        let o = d + 1 - self.kernel_size;
        (o / 2) * (o / 2) * self.filters
    }

    pub fn output_shape(&self, d: usize) -> [usize; 3] {
        let o = d + 1 - self.kernel_size;
        [o / 2, o / 2, self.filters]
    }

    /// Encodes a `[D, D, M]` tensor into a `[1, n]` feature row.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, state: Var) -> Result<Var> {
        let shape = tape.shape(state).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(MagnetError::Dimension(format!(
                "conv expects [D, D, {}], got {shape:?}",
                self.channels
            )));
        }
        if shape[0] < self.kernel_size + 1 || shape[1] < self.kernel_size + 1 {
            return Err(MagnetError::Input(format!(
                "grid {}x{} too small for a {k}x{k} kernel followed by pooling",
                shape[0],
                shape[1],
                k = self.kernel_size
            )));
        }
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let c = tape.conv2d(state, k, b)?;
        let c = tape.relu(c);
        let p = tape.max_pool2(c)?;
        let n = tape.value(p).len();
        tape.reshape(p, vec![1, n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_over_ones_gives_25() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[5, 5, 1], 1.0));
        let k = tape.constant(Tensor::filled(&[5, 5, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).item(), 25.0);
    }

    #[test]
    fn zero_input_zero_features() {
        let mut store = ParamStore::new();
        let cp = ConvPool::new(&mut store, "c", 5, 3, 4, &mut RngStream::new(1, "t"));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[10, 10, 3]));
        let y = cp.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn desk_scale_shape() {
        let mut store = ParamStore::new();
        let cp = ConvPool::new(&mut store, "c", 5, 8, 4, &mut RngStream::new(1, "t"));
        assert_eq!(cp.output_shape(16), [6, 6, 4]);
        assert_eq!(cp.output_len(16), 144);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[16, 16, 8], 0.5));
        let y = cp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 144]);
    }

    #[test]
    fn grid_smaller_than_kernel() {
        let mut store = ParamStore::new();
        let cp = ConvPool::new(&mut store, "c", 5, 1, 1, &mut RngStream::new(1, "t"));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 4, 1]));
        assert!(matches!(cp.forward(&mut tape, &store, x), Err(MagnetError::Input(_))));
    }
}
