//! Recursive parameter-sharing transformers at desk scale.
//!
//! - [`signature`]: parse and expand sharing signatures like `A^3B@d1`.
//! - [`ledger`]: parameter counts, per-step compute and compute-matched budgets.
//! - [`model`]: the recursive decoder with stochastic rounds, adapters and KV sharing.
//! - [`corpus`]: grammar corpora, byte tokenizer and sequence packing.
//! - [`eval`]: zero-shot multiple-choice scoring and prompt templates.
//! - [`scaling`]: power-law fits of loss against compute and optimal rounds.
//! - [`train`]: learning-rate schedule, Adam and the compute-matched training loop.

pub mod corpus;
pub mod eval;
pub mod ledger;
pub mod model;
pub mod scaling;
pub mod signature;
pub mod train;

pub use ledger::{CostLedger, CostMode, ModelDims};
pub use model::{RecursionPolicy, RecursiveModel};
pub use signature::{ExecutionPlan, Signature};
pub use train::{LossTrace, TrainConfig};
