//! Dense-tensor reverse-mode differentiation and first-order optimizers.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_str, save_checkpoint, to_checkpoint_string, CHECKPOINT_HEADER,
};
pub use gradcheck::{check_gradients, check_param_gradients};
pub use optim::{Optimizer, OptimizerHyper, OptimizerKind};
pub use params::{Param, ParamId, ParamStore};
pub use rng::{RngCursor, RngStream};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;
