//! Multi-agent reinforcement learning with a learned relevance graph over
//! agents and environment objects, and typed message passing between them.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] and [`nn`]: a small reverse-mode engine and the layers
//!   the networks are made of.
//! * [`envs`]: predator-prey and a bomber grid game, with scripted agents.
//! * [`graph`]: relevance-graph generation and its losses.
//! * [`actor`]: the message-passing decision network.
//! * [`training`]: DDPG/MADDPG updates, pre-training, the MADQN baseline.
//! * [`config`], [`registry`] and [`run`]: experiment configuration,
//!   strategy lookup by name, and run-directory artefacts.

pub mod actor;
pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod envs;
pub mod graph;
pub mod error;
pub mod nn;
pub mod registry;
pub mod run;
pub mod training;

pub use error::{MagnetError, Result};
