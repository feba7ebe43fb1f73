//! Dynamic token coverage: how many tokens a layer keeps and which ones each
//! head keeps.
//!
//! 1. Score tokens per head from a proxy attention map built with only the
//!    most recent `last_q` queries ([`score_tokens`]).
//! 2. Sum the head scores and normalise them into one layer distribution
//!    ([`aggregate_scores`]).
//! 3. Drop the smallest ascending prefix of that distribution whose mass
//!    reaches `tau`; what remains is the shared budget `k_keep`
//!    ([`coverage_budget`]).
//! 4. Each head independently keeps its own top-`k_keep` tokens
//!    ([`select_tokens`]).
//!
//! [`fixed_budget`] is the constant-ratio baseline used for comparison.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attention::{HeadTensors, TokenSelection};
use crate::error::{Error, Result};
use crate::tensor::{avg_pool_1d, gather_rows, matmul, softmax_rows, Tensor};

pub const DEFAULT_LAST_Q: usize = 64;
pub const DEFAULT_KERNEL: usize = 7;

/// Per-head token importance, `[H, L]`, all entries non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScores {
    pub scores: Tensor,
    pub last_q: usize,
    pub kernel: usize,
}

impl HeadScores {
    pub fn n_heads(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn head(&self, h: usize) -> &[f32] {
        self.scores.row(h)
    }
}

/// Head scores summed and normalised to a distribution over tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub scores: Vec<f64>,
}

/// Tokens that every head must keep regardless of score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcedPolicy {
    None,
    /// The final token.
    #[default]
    LastToken,
    /// The trailing `last_q` tokens (the observation window).
    TrailingWindow,
}

impl ForcedPolicy {
    pub fn resolve(self, seq_len: usize, last_q: usize) -> Vec<usize> {
        match self {
            ForcedPolicy::None => Vec::new(),
            ForcedPolicy::LastToken => seq_len.checked_sub(1).into_iter().collect(),
            ForcedPolicy::TrailingWindow => (seq_len.saturating_sub(last_q)..seq_len).collect(),
        }
    }
}

/// Proxy attention from the trailing `last_q` queries to every key, summed
/// over queries and smoothed with an odd-width moving average.
///
/// The trailing block is causally masked, so a recent query never scores a
/// key that comes after it. `last_q` is clamped to the sequence length.
pub fn score_tokens(heads: &HeadTensors, last_q: usize, kernel: usize) -> Result<HeadScores> {
    if last_q == 0 {
        return Err(Error::Parameter("last_q must be at least 1".into()));
    }
    avg_pool_1d(&[], kernel)?;
    let len = heads.seq_len();
    let window = last_q.min(len);
    let first = len - window;
    let recent: Vec<usize> = (first..len).collect();
    let scale = 1.0 / (heads.d_head() as f32).sqrt();
    let mask: Vec<bool> = (0..window * len)
        .map(|e| e % len <= first + e / len)
        .collect();

    let mut data = Vec::with_capacity(heads.n_heads() * len);
    for h in 0..heads.n_heads() {
        let q = gather_rows(&heads.query(h), &recent)?;
        let logits = matmul(&q, &heads.key(h).transpose()?)?.scale(scale);
        let probs = softmax_rows(&logits, Some(&mask))?;
        let mut column_sums = vec![0.0f64; len];
        for r in 0..window {
            for (acc, &p) in column_sums.iter_mut().zip(probs.row(r)) {
                *acc += f64::from(p);
            }
        }
        let column_sums: Vec<f32> = column_sums.into_iter().map(|x| x as f32).collect();
        data.extend(avg_pool_1d(&column_sums, kernel)?);
    }
    Ok(HeadScores {
        scores: Tensor::new(vec![heads.n_heads(), len], data)?,
        last_q: window,
        kernel,
    })
}

/// `s_l = Σ_h s_h / Σ_t Σ_h s_h[t]`, reduced head by head in index order.
pub fn aggregate_scores(scores: &HeadScores) -> Result<LayerScores> {
    let len = scores.seq_len();
    let mut summed = vec![0.0f64; len];
    for h in 0..scores.n_heads() {
        for (acc, &s) in summed.iter_mut().zip(scores.head(h)) {
            *acc += f64::from(s);
        }
    }
    let total: f64 = summed.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Parameter(
            "cannot normalise token scores: total mass is zero".into(),
        ));
    }
    Ok(LayerScores {
        scores: summed.into_iter().map(|s| s / total).collect(),
    })
}

/// Token indices sorted by ascending score; equal scores keep index order.
pub fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Parameter(format!("tau must lie in [0, 1], got {tau}")));
    }
    Ok(())
}

/// Smallest `k` such that the `k` least important tokens carry at least `tau`
/// of the mass. Prefix sums run left to right over the ascending order. If
/// rounding keeps the full sum below `tau`, every token counts as dropped.
pub fn sparse_count(layer: &LayerScores, tau: f64) -> Result<usize> {
    check_tau(tau)?;
    if tau <= 0.0 {
        return Ok(0);
    }
    let mut mass = 0.0f64;
    for (k, &i) in ascending_order(&layer.scores).iter().enumerate() {
        mass += layer.scores[i];
        if mass >= tau {
            return Ok(k + 1);
        }
    }
    Ok(layer.scores.len())
}

/// `k_keep = max(L - k_sparse, min_keep)`.
pub fn coverage_budget(layer: &LayerScores, tau: f64, min_keep: usize) -> Result<usize> {
    let len = layer.scores.len();
    if min_keep == 0 || min_keep > len {
        return Err(Error::Parameter(format!(
            "min_keep must lie in [1, {len}], got {min_keep}"
        )));
    }
    Ok((len - sparse_count(layer, tau)?).max(min_keep))
}

/// `k_keep = max(round((1 - s)·L), min_keep)` for a fixed sparsity ratio `s`.
pub fn fixed_budget(seq_len: usize, sparsity: f64, min_keep: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Parameter(format!(
            "fixed sparsity must lie in [0, 1), got {sparsity}"
        )));
    }
    let keep = ((1.0 - sparsity) * seq_len as f64).round() as usize;
    Ok(keep.max(min_keep).min(seq_len))
}

/// Per head: the forced tokens plus the highest-scoring remaining tokens up
/// to `k_keep`, ties going to the lower index. Output is sorted ascending.
pub fn select_tokens(scores: &HeadScores, k_keep: usize, forced: &[usize]) -> Result<TokenSelection> {
    let len = scores.seq_len();
    let mut forced = forced.to_vec();
    forced.sort_unstable();
    forced.dedup();
    if let Some(&bad) = forced.iter().find(|&&f| f >= len) {
        return Err(Error::Parameter(format!("forced index {bad} out of range for length {len}")));
    }
    if k_keep < forced.len().max(1) || k_keep > len {
        return Err(Error::Parameter(format!(
            "k_keep {k_keep} outside [{}, {len}]",
            forced.len().max(1)
        )));
    }
    let mut is_forced = vec![false; len];
    for &f in &forced {
        is_forced[f] = true;
    }
    let free = k_keep - forced.len();
    let per_head = (0..scores.n_heads())
        .map(|h| {
            let s = scores.head(h);
            let mut candidates: Vec<usize> = (0..len).filter(|&t| !is_forced[t]).collect();
            let by_rank = |&a: &usize, &b: &usize| -> Ordering { s[b].total_cmp(&s[a]).then(a.cmp(&b)) };
            if free < candidates.len() && free > 0 {
                candidates.select_nth_unstable_by(free - 1, by_rank);
            }
            candidates.truncate(free);
            candidates.extend_from_slice(&forced);
            candidates.sort_unstable();
            candidates
        })
        .collect();
    Ok(TokenSelection {
        tau: None,
        k_keep,
        per_head,
        forced,
    })
}

/// How a sparse layer sizes its budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetRule {
    /// Dynamic coverage with threshold `tau`.
    Coverage(f64),
    /// Constant sparsity ratio.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageParams {
    pub last_q: usize,
    pub kernel: usize,
    pub forced: ForcedPolicy,
}

impl Default for CoverageParams {
    fn default() -> Self {
        Self {
            last_q: DEFAULT_LAST_Q,
            kernel: DEFAULT_KERNEL,
            forced: ForcedPolicy::default(),
        }
    }
}

/// Scores, budgets and selects tokens for one layer.
pub fn select_for_layer(heads: &HeadTensors, rule: BudgetRule, params: &CoverageParams) -> Result<TokenSelection> {
    let len = heads.seq_len();
    let scores = score_tokens(heads, params.last_q, params.kernel)?;
    let forced = params.forced.resolve(len, params.last_q);
    let min_keep = forced.len().max(1);
    let (k_keep, tau) = match rule {
        BudgetRule::Coverage(tau) => (coverage_budget(&aggregate_scores(&scores)?, tau, min_keep)?, Some(tau)),
        BudgetRule::Fixed(s) => (fixed_budget(len, s, min_keep)?, None),
    };
    let mut selection = select_tokens(&scores, k_keep, &forced)?;
    selection.tau = tau;
    Ok(selection)
}
