use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{MagnetError, Result};

/// Declarative description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    LstmCell { input: usize, hidden: usize },
    SelfAttentionEncoder { width: usize, heads: usize, ff: usize },
    Conv2d { kernel: usize, in_channels: usize, filters: usize },
    MaxPool { size: usize },
    Dropout { rate: f64 },
    Relu,
    Tanh,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::Dense { input, output } => *input > 0 && *output > 0,
            LayerSpec::LstmCell { input, hidden } => *input > 0 && *hidden > 0,
            LayerSpec::SelfAttentionEncoder { width, heads, ff } => {
                *width > 0 && *heads > 0 && *ff > 0 && width % heads == 0
            }
            LayerSpec::Conv2d {
                kernel,
                in_channels,
                filters,
            } => *kernel > 0 && *in_channels > 0 && *filters > 0,
            LayerSpec::MaxPool { size } => *size == 2,
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(rate),
            LayerSpec::Relu | LayerSpec::Tanh => true,
        };
        if ok {
            Ok(())
        } else {
            Err(MagnetError::Input(format!("invalid layer spec {self:?}")))
        }
    }
}

/// Glorot-uniform initialised tensor.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut RngStream) -> Self {
        let weight = store.add(format!("{name}.w"), glorot(&[input, output], input, output, rng));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    /// `x[m, input] · W + b`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut RngStream, train: bool) -> Result<Var> {
    if !train || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, Rc::new(mask))
}

#[derive(Clone, Debug)]
enum Built {
    Dense(Dense),
    Dropout(f64),
    Relu,
    Tanh,
}

/// A feed-forward stack assembled from [`LayerSpec`]s.
#[derive(Clone, Debug)]
pub struct Sequential {
    layers: Vec<Built>,
    input: usize,
    output: usize,
}

impl Sequential {
    pub fn new(store: &mut ParamStore, name: &str, specs: &[LayerSpec], rng: &mut RngStream) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut input = None;
        let mut width = None;
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            match spec {
                LayerSpec::Dense { input: inp, output } => {
                    if let Some(w) = width {
                        if w != *inp {
                            return Err(MagnetError::dim(i, format!("expects {inp} inputs, previous layer gives {w}")));
                        }
                    }
                    input.get_or_insert(*inp);
                    width = Some(*output);
                    layers.push(Built::Dense(Dense::new(store, &format!("{name}.{i}"), *inp, *output, rng)));
                }
                LayerSpec::Dropout { rate } => layers.push(Built::Dropout(*rate)),
                LayerSpec::Relu => layers.push(Built::Relu),
                LayerSpec::Tanh => layers.push(Built::Tanh),
                other => {
                    return Err(MagnetError::Input(format!(
                        "layer {i}: {other:?} is not a feed-forward layer"
                    )))
                }
            }
        }
        match (input, width) {
            (Some(input), Some(output)) => Ok(Self { layers, input, output }),
            _ => Err(MagnetError::Input(format!("{name}: stack has no dense layer"))),
        }
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn output_width(&self) -> usize {
        self.output
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Built::Dense(d) => {
                    let (_, cols) = tape.value(h).dims2();
                    if cols != d.input {
                        return Err(MagnetError::dim(i, format!("expects width {}, got {cols}", d.input)));
                    }
                    d.forward(tape, store, h)?
                }
                Built::Dropout(rate) => dropout(tape, h, *rate, rng, train)?,
                Built::Relu => tape.relu(h),
                Built::Tanh => tape.tanh(h),
            };
        }
        Ok(h)
    }
}

/// Evaluates a layer list in one shot: builds parameters into `store` under
/// `name` (if not already there) and runs the forward pass.
pub fn forward_mlp(
    tape: &mut Tape,
    store: &mut ParamStore,
    name: &str,
    specs: &[LayerSpec],
    input: Var,
    rng: &mut RngStream,
    train: bool,
) -> Result<Var> {
    let net = Sequential::new(store, name, specs, &mut rng.derive("init"))?;
    net.forward(tape, store, input, rng, train)
}

/// Dense stack with ReLU on hidden layers and a chosen output activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    seq: Sequential,
    output_activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        dropout: f64,
        output_activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(MagnetError::Input(format!("{name}: an MLP needs at least two sizes")));
        }
        let mut specs = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            specs.push(LayerSpec::Dense {
                input: w[0],
                output: w[1],
            });
            if i + 2 < sizes.len() {
                specs.push(LayerSpec::Relu);
                if dropout > 0.0 {
                    specs.push(LayerSpec::Dropout { rate: dropout });
                }
            }
        }
        Ok(Self {
            seq: Sequential::new(store, name, &specs, rng)?,
            output_activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.seq.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.seq.output_width()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        let y = self.seq.forward(tape, store, x, rng, train)?;
        Ok(self.output_activation.apply(tape, y))
    }

    /// Forward pass with dropout disabled and no rng consumption.
    pub fn eval(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut rng = RngStream::new(0, "eval");
        self.forward(tape, store, x, &mut rng, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
        let id = store.lookup(name).unwrap();
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::new(shape, data).unwrap();
    }

    #[test]
    fn identity_dense_layer() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1, "t");
        let seq = Sequential::new(&mut store, "l", &[LayerSpec::Dense { input: 2, output: 2 }], &mut rng).unwrap();
        set(&mut store, "l.0.w", vec![1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 2.0]));
        let y = seq.forward(&mut tape, &store, x, &mut rng, false).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_then_relu_by_hand() {
        // W = [[1,1],[0,1]] acting on column x: y = Wx + b. Row-vector layout
        // stores the transpose.
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1, "t");
        let seq = Sequential::new(
            &mut store,
            "l",
            &[LayerSpec::Dense { input: 2, output: 2 }, LayerSpec::Relu],
            &mut rng,
        )
        .unwrap();
        set(&mut store, "l.0.w", vec![1.0, 0.0, 1.0, 1.0]);
        set(&mut store, "l.0.b", vec![0.5, 0.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 1.0]));
        let y = seq.forward(&mut tape, &store, x, &mut rng, false).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 1.0]);
    }

    #[test]
    fn dropout_off_is_bit_exact_identity() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3, "t");
        let with = Mlp::new(&mut store, "a", &[3, 8, 2], 0.4, Activation::Linear, &mut rng).unwrap();
        let mut store2 = ParamStore::new();
        let mut rng2 = RngStream::new(3, "t");
        let without = Mlp::new(&mut store2, "a", &[3, 8, 2], 0.0, Activation::Linear, &mut rng2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.3, -1.2, 2.0]));
        let a = with.forward(&mut tape, &store, x, &mut rng, false).unwrap();
        let b = without.forward(&mut tape, &store2, x, &mut rng2, false).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn dropout_on_changes_output() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3, "t");
        let net = Mlp::new(&mut store, "a", &[4, 64, 64, 2], 0.4, Activation::Linear, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.3, -1.2, 2.0, 1.0]));
        let a = net.forward(&mut tape, &store, x, &mut rng, true).unwrap();
        let b = net.forward(&mut tape, &store, x, &mut rng, false).unwrap();
        assert_ne!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1, "t");
        let err = Sequential::new(
            &mut store,
            "l",
            &[
                LayerSpec::Dense { input: 2, output: 3 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 4, output: 1 },
            ],
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 2"), "{err}");

        let seq = Sequential::new(&mut store, "m", &[LayerSpec::Dense { input: 2, output: 3 }], &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let err = seq.forward(&mut tape, &store, x, &mut rng, false).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }
}
