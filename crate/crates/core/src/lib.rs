//! Conditional computation for feed-forward networks.
//!
//! Each hidden layer is split into blocks of units. A per-layer Bernoulli
//! policy, conditioned on the previous layer's activations, decides which
//! blocks to evaluate for each example, and the masked products skip the
//! inactive blocks entirely. Policies are trained with REINFORCE on the
//! classification cost together with penalties that pin the activation
//! rate to a target `τ` while keeping the decisions input-dependent.
//!
//! The crate is organised as
//!
//! * [`linalg`]: dense matrices, block masks and the block-sparse kernel,
//! * [`policy`]: Bernoulli policies, sampling and score-function gradients,
//! * [`network`]: forward/backward passes of the gated network,
//! * [`regularizers`]: sparsity and variance penalties,
//! * [`trainer`]: the joint SGD loop,
//! * [`data`]: MNIST / CIFAR-10 loaders and a synthetic dataset,
//! * [`checkpoint`], [`config`], [`cli`]: persistence and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod network;
pub mod policy;
pub mod regularizers;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{masked_matmul, matmul, BlockMask, Matrix};
pub use network::{Architecture, Gate, LayerShape, NetworkParams};
pub use policy::{PolicyParams, PolicySample};
pub use trainer::{GateKind, Hyperparams, Model};
