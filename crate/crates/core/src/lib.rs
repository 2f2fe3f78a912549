//! Meta-learning an unsupervised, neuron-local weight-update rule.
//!
//! The crate trains the meta-parameters of a learned update rule by
//! differentiating a few-shot linear-regression objective through truncated
//! unrolls of the rule applied to small MLPs, then evaluates how the rule
//! generalizes across datasets, input permutations, and architectures.

pub mod error;
pub mod tensor;

pub mod base_model;
pub mod meta_objective;
pub mod update_rule;

pub mod tasks;

pub mod trainer;

pub mod dist;

pub mod analysis;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod rollout;

pub use error::{Error, Result, TensorError};
pub use tensor::{Tape, Tensor, Var};
