//! Token-level sparse attention for long-context prefill.
//!
//! Each sparse layer scores tokens per head from a cheap proxy attention map,
//! sizes a shared budget from the score distribution, lets every head keep its
//! own top tokens, runs ordinary attention on the gathered rows and scatters
//! the result back to full length. Unselected tokens pass through on the
//! residual stream and are re-scored at the next sparse layer.
//!
//! - [`tensor`]: dense kernels.
//! - [`attention`]: dense, oracle and token-sparse attention.
//! - [`coverage`]: token scoring, coverage budgets and per-head selection.
//! - [`drift`]: representation drift and sparse-layer selection.
//! - [`model`]: a toy decoder with a per-layer sparse plan and checkpoints.
//! - [`flops`]: the analytic cost model.
//! - [`bench`]: the experiment commands behind the `tsa` binary.

pub mod attention;
pub mod bench;
pub mod coverage;
pub mod drift;
mod error;
pub mod flops;
pub mod model;
pub mod tensor;

pub use attention::{
    dense_causal_attention, masked_sparse_oracle, token_sparse_attention, AttentionBackend, DenseCausal, HeadTensors,
    TokenSelection,
};
pub use coverage::{
    aggregate_scores, coverage_budget, fixed_budget, score_tokens, select_tokens, BudgetRule, CoverageParams,
    ForcedPolicy, HeadScores, LayerScores,
};
pub use drift::{calibrate, compute_drift, select_sparse_layers, DriftProfile};
pub use error::{Error, Result};
pub use flops::{estimate_flops, AttentionShape, FlopReport};
pub use model::{Model, ModelConfig, SparseMode, SparsePlan};
pub use tensor::Tensor;
