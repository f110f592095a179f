//! Reinforcement learning with iterated relearning (periodic distillation of
//! the agent into a freshly initialised network) on procedural gridworlds, and
//! a supervised lab for studying transient non-stationarity.
//!
//! The crate is self-contained: [`autodiff`] provides the reverse-mode engine
//! and [`nn`]/[`optim`] the layers and optimizers every other module builds on.

pub mod autodiff;
pub mod checkpoint;
pub mod env;
pub mod iter;
pub mod lab;
pub mod linalg;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod ppo;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use nn::{Classifier, Network, NetworkSpec, PolicyValueNet};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;
