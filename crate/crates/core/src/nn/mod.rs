//! Layers built on the tape: dense stacks, LSTM cell, self-attention
//! encoder block, and convolution + pooling.

mod attention;
mod conv;
mod layers;
mod lstm;

pub use attention::{AttentionOutput, SelfAttentionEncoder};
pub use conv::ConvPool;
pub use layers::{forward_mlp, glorot, Activation, Dense, LayerSpec, Mlp, Sequential};
pub use lstm::LstmCell;
