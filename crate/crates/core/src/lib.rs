//! Simulator for early-exit self-speculative decoding with a dynamic
//! exit-layer and speculation-length controller.
//!
//! Models are synthetic: every layer exposes a next-token distribution and
//! cost is counted in layer loads, so speedups are reported as tokens per
//! layer rather than wall-clock time.

pub mod baselines;
pub mod cli;
pub mod del;
pub mod engine;
pub mod harness;
pub mod model;
pub mod policy;
pub mod trace;
pub mod types;

pub use del::{best_exit_and_len, estimate_alpha, tpl, update_threshold, DelController};
pub use engine::{CostLedger, Decoder, DraftPlan, RoundOutcome};
pub use harness::{compute_etpl, HarnessError, RunReport};
pub use model::{CountingModel, LayerStep, LayeredModel, ModelSpec, SyntheticModel};
pub use policy::{Policy, PolicySpec};
pub use types::{ConfigError, DecodeMode, Distribution, LayerIndex, SessionConfig, TokenId};
