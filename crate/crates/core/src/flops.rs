//! Analytic FLOP model for dense vs. token-sparse prefill attention.
//!
//! Per head, with sequence length `L`, head width `d` and `k` kept tokens:
//!
//! | term | count |
//! |---|---|
//! | dense attention (`QKᵀ` + `A·V`) | `4·L²·d` |
//! | compressed attention | `4·k²·d` |
//! | proxy scoring (`last_q` queries × `L` keys) | `2·w·L·d`, `w = min(last_q, L)` |
//! | pooling + sort/top-k | `L·(kernel + log₂L)` |
//! | gather Q/K/V + scatter output | `6·k·d + L·d` |
//!
//! Dense layers contribute `4·L²·d` to both sides of the speedup ratio.

use serde::{Deserialize, Serialize};

/// Attention cost of one layer, summed over heads.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerFlops {
    pub dense: f64,
    pub sparse: f64,
    pub scoring: f64,
    pub indexing: f64,
    pub gather_scatter: f64,
}

impl LayerFlops {
    pub fn overhead(&self) -> f64 {
        self.scoring + self.indexing + self.gather_scatter
    }
}

/// Shape parameters shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionShape {
    pub seq_len: usize,
    pub d_head: usize,
    pub n_heads: usize,
    pub last_q: usize,
    pub kernel: usize,
}

/// Cost of one layer. `k_keep = None` marks a dense layer.
pub fn layer_flops(shape: &AttentionShape, k_keep: Option<usize>) -> LayerFlops {
    let l = shape.seq_len as f64;
    let d = shape.d_head as f64;
    let h = shape.n_heads as f64;
    let dense = h * 4.0 * l * l * d;
    match k_keep {
        None => LayerFlops {
            dense,
            sparse: dense,
            ..LayerFlops::default()
        },
        Some(k) => {
            let k = k as f64;
            let window = shape.last_q.min(shape.seq_len) as f64;
            LayerFlops {
                dense,
                sparse: h * 4.0 * k * k * d,
                scoring: h * 2.0 * window * l * d,
                indexing: h * l * (shape.kernel as f64 + l.max(1.0).log2()),
                gather_scatter: h * (6.0 * k * d + l * d),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub k_keep: usize,
    pub map_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub dense_flops: f64,
    pub sparse_flops: f64,
    pub overhead_flops: f64,
    pub scoring_flops: f64,
    pub indexing_flops: f64,
    pub gather_scatter_flops: f64,
    /// `dense / (sparse + overhead)` over all layers.
    pub est_speedup: f64,
    /// Dense over compressed attention FLOPs on the sparse layers only,
    /// overhead excluded.
    pub attention_ratio: f64,
    /// Share of the sparse-side total spent on overhead.
    pub overhead_fraction: f64,
    pub map_sparsity: Vec<LayerSparsity>,
    pub avg_map_sparsity: f64,
}

/// `1 - (k_keep / L)²`: the fraction of the `L × L` map a layer skips.
pub fn map_sparsity(k_keep: usize, seq_len: usize) -> f64 {
    let keep = k_keep as f64 / seq_len as f64;
    1.0 - keep * keep
}

/// Aggregates [`layer_flops`] over a model whose layer `l` keeps
/// `budgets[l]` tokens (`None` = dense).
pub fn estimate_flops(shape: &AttentionShape, budgets: &[Option<usize>]) -> FlopReport {
    let mut total = LayerFlops::default();
    let (mut sparse_dense, mut sparse_compressed) = (0.0, 0.0);
    let mut per_layer = Vec::new();
    for (layer, &k) in budgets.iter().enumerate() {
        let f = layer_flops(shape, k);
        total.dense += f.dense;
        total.sparse += f.sparse;
        total.scoring += f.scoring;
        total.indexing += f.indexing;
        total.gather_scatter += f.gather_scatter;
        if let Some(k_keep) = k {
            sparse_dense += f.dense;
            sparse_compressed += f.sparse;
            per_layer.push(LayerSparsity {
                layer,
                k_keep,
                map_sparsity: map_sparsity(k_keep, shape.seq_len),
            });
        }
    }
    let overhead = total.overhead();
    let avg_map_sparsity = if per_layer.is_empty() {
        0.0
    } else {
        per_layer.iter().map(|l| l.map_sparsity).sum::<f64>() / per_layer.len() as f64
    };
    let attention_ratio = if sparse_compressed > 0.0 {
        sparse_dense / sparse_compressed
    } else {
        1.0
    };
    FlopReport {
        dense_flops: total.dense,
        sparse_flops: total.sparse,
        overhead_flops: overhead,
        scoring_flops: total.scoring,
        indexing_flops: total.indexing,
        gather_scatter_flops: total.gather_scatter,
        est_speedup: total.dense / (total.sparse + overhead),
        attention_ratio,
        overhead_fraction: overhead / (total.sparse + overhead),
        map_sparsity: per_layer,
        avg_map_sparsity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(seq_len: usize) -> AttentionShape {
        AttentionShape {
            seq_len,
            d_head: 16,
            n_heads: 8,
            last_q: 64,
            kernel: 7,
        }
    }

    #[test]
    fn keeping_everything_is_pure_overhead() {
        let r = estimate_flops(&shape(256), &[Some(256), None, Some(256), None]);
        assert!(r.est_speedup < 1.0);
        assert_eq!(r.attention_ratio, 1.0);
        assert_eq!(r.avg_map_sparsity, 0.0);
    }

    #[test]
    fn half_budget_quarters_attention() {
        let r = estimate_flops(&shape(256), &[Some(128), None]);
        assert_eq!(r.attention_ratio, 4.0);
        assert_eq!(r.map_sparsity[0].map_sparsity, 0.75);
        let f = layer_flops(&shape(256), Some(128));
        assert_eq!(f.dense / f.sparse, 4.0);
    }

    #[test]
    fn hand_counted_layer() {
        let s = AttentionShape {
            seq_len: 8,
            d_head: 2,
            n_heads: 1,
            last_q: 4,
            kernel: 3,
        };
        let f = layer_flops(&s, Some(4));
        assert_eq!(f.dense, 4.0 * 64.0 * 2.0);
        assert_eq!(f.sparse, 4.0 * 16.0 * 2.0);
        assert_eq!(f.scoring, 2.0 * 4.0 * 8.0 * 2.0);
        assert_eq!(f.indexing, 8.0 * (3.0 + 3.0));
        assert_eq!(f.gather_scatter, 6.0 * 4.0 * 2.0 + 8.0 * 2.0);
    }

    #[test]
    fn speedup_decreases_with_budget() {
        let mut last = f64::INFINITY;
        for k in [1, 16, 64, 128, 200, 256] {
            let r = estimate_flops(&shape(256), &[Some(k); 4]);
            assert!(r.est_speedup < last);
            last = r.est_speedup;
        }
    }

    #[test]
    fn vanishing_budget_has_finite_limit() {
        let s = shape(1024);
        let r = estimate_flops(&s, &[Some(1); 4]);
        let f = layer_flops(&s, Some(0));
        let limit = f.dense / f.overhead();
        assert!(r.est_speedup.is_finite());
        assert!(r.est_speedup < limit);
        assert!((r.est_speedup - limit).abs() / limit < 0.01);
    }

    #[test]
    fn all_dense_is_unit_speedup() {
        let r = estimate_flops(&shape(64), &[None; 3]);
        assert_eq!(r.est_speedup, 1.0);
        assert_eq!(r.overhead_flops, 0.0);
        assert!(r.map_sparsity.is_empty());
    }
}
