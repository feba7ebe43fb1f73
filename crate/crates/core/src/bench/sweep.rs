use serde::Serialize;

use super::{csv_row, random_tokens, RunConfig};
use crate::coverage::{aggregate_scores, coverage_budget, score_tokens, LayerScores};
use crate::drift::{compute_drift, select_sparse_layers};
use crate::error::Result;
use crate::flops::{estimate_flops, AttentionShape};
use crate::model::SparsePlan;

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub seq_len: usize,
    pub avg_k_keep: f64,
    pub map_sparsity: f64,
    pub est_speedup: f64,
}

/// A published map-sparsity measurement, carried in the report for
/// side-by-side comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceRow {
    pub tau: f64,
    pub context: &'static str,
    pub map_sparsity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config: RunConfig,
    /// Sparse layers per sequence length, from drift ranking of the dense pass.
    pub sparse_layers: Vec<(usize, Vec<usize>)>,
    pub rows: Vec<SweepRow>,
    pub reference: Vec<ReferenceRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,seq_len,avg_k_keep,map_sparsity,est_speedup\n");
        for r in &self.rows {
            out += &csv_row(&[
                r.tau.to_string(),
                r.seq_len.to_string(),
                r.avg_k_keep.to_string(),
                r.map_sparsity.to_string(),
                r.est_speedup.to_string(),
            ]);
        }
        out
    }
}

fn reference_rows() -> Vec<ReferenceRow> {
    const CONTEXTS: [&str; 6] = ["4K", "8K", "16K", "32K", "64K", "128K"];
    const AT_0_005: [f64; 6] = [0.1700, 0.2111, 0.2661, 0.2844, 0.3407, 0.5444];
    const AT_0_010: [f64; 6] = [0.2802, 0.3298, 0.3955, 0.4125, 0.4732, 0.6736];
    let mut rows = Vec::new();
    for (tau, values) in [(0.005, AT_0_005), (0.010, AT_0_010)] {
        for (context, map_sparsity) in CONTEXTS.iter().zip(values) {
            rows.push(ReferenceRow {
                tau,
                context,
                map_sparsity,
            });
        }
    }
    rows
}

/// A score distribution with `heavy` evenly spaced tokens carrying
/// `heavy_mass` and the rest sharing the remainder uniformly. Growing `len`
/// at fixed `heavy` lengthens the low-mass tail.
pub fn synthetic_tail_scores(len: usize, heavy: usize, heavy_mass: f64) -> LayerScores {
    let heavy = heavy.min(len);
    let stride = len / heavy.max(1);
    let is_heavy = |t: usize| heavy > 0 && t % stride == 0 && t / stride < heavy;
    let tail = len - heavy;
    let scores = (0..len)
        .map(|t| {
            if is_heavy(t) {
                heavy_mass / heavy as f64
            } else if tail > 0 {
                (1.0 - heavy_mass) / tail as f64
            } else {
                0.0
            }
        })
        .collect();
    LayerScores { scores }
}

/// Coverage budgets across `tau × seq_len`.
///
/// Each sparse layer is scored on its input from the dense pass, so every
/// `tau` sees the same scores and the rows are comparable on a fixed input.
pub fn cmd_sweep(config: &RunConfig) -> Result<SweepReport> {
    let model = config.load_model()?;
    let mc = &model.config;
    let mut rows = Vec::new();
    let mut sparse_layers = Vec::new();
    for &len in config.seq_lens() {
        let tokens = random_tokens(config.seed, 0, len, mc.vocab_size);
        let dense = model.forward(&tokens, &SparsePlan::dense())?;
        let profile = select_sparse_layers(&compute_drift(&dense.hidden_trace, config.epsilon)?, config.delta)?;
        let forced = config.forced.resolve(len, config.last_q);
        let min_keep = forced.len().max(1);

        let mut layer_scores = Vec::new();
        for &l in &profile.sparse_layers {
            let heads = model.project_heads(&dense.hidden_trace[l], l)?;
            let scores = score_tokens(&heads, config.last_q, config.kernel)?;
            layer_scores.push((l, aggregate_scores(&scores)?));
        }

        let shape = AttentionShape {
            seq_len: len,
            d_head: mc.d_head,
            n_heads: mc.n_heads,
            last_q: config.last_q,
            kernel: config.kernel,
        };
        for &tau in config.taus() {
            let mut budgets = vec![None; mc.n_layers];
            for (l, s) in &layer_scores {
                budgets[*l] = Some(coverage_budget(s, tau, min_keep)?);
            }
            let report = estimate_flops(&shape, &budgets);
            let kept: Vec<usize> = budgets.iter().flatten().copied().collect();
            let avg_k_keep = if kept.is_empty() {
                len as f64
            } else {
                kept.iter().sum::<usize>() as f64 / kept.len() as f64
            };
            rows.push(SweepRow {
                tau,
                seq_len: len,
                avg_k_keep,
                map_sparsity: report.avg_map_sparsity,
                est_speedup: report.est_speedup,
            });
        }
        sparse_layers.push((len, profile.sparse_layers));
    }
    Ok(SweepReport {
        config: config.clone(),
        sparse_layers,
        rows,
        reference: reference_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Command;
    use crate::flops::map_sparsity;

    #[test]
    fn synthetic_fixture_is_normalised() {
        for len in [16, 100, 1000] {
            let s = synthetic_tail_scores(len, 8, 0.9);
            assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(s.scores.iter().filter(|&&x| x > 0.05).count(), 8.min(len));
        }
    }

    #[test]
    fn longer_tails_are_sparser() {
        for tau in [0.01, 0.05, 0.1] {
            let mut last = -1.0;
            for len in [64, 128, 256, 512, 1024, 2048] {
                let s = synthetic_tail_scores(len, 8, 0.9);
                let k = coverage_budget(&s, tau, 1).unwrap();
                let sp = map_sparsity(k, len);
                assert!(sp >= last, "tau {tau} len {len}: {sp} < {last}");
                last = sp;
            }
        }
    }

    #[test]
    fn sweep_rows_are_monotone_in_tau() {
        let cfg = RunConfig {
            seq_len: Some(vec![48, 96]),
            ..RunConfig::default()
        }
        .resolve(Command::Sweep)
        .unwrap();
        let r = cmd_sweep(&cfg).unwrap();
        assert_eq!(r.rows.len(), 2 * cfg.taus().len());
        for chunk in r.rows.chunks(cfg.taus().len()) {
            assert_eq!(chunk[0].tau, 0.0);
            assert_eq!(chunk[0].map_sparsity, 0.0);
            assert!(chunk[0].est_speedup <= 1.0);
            for w in chunk.windows(2) {
                assert!(w[1].map_sparsity >= w[0].map_sparsity);
                assert!(w[1].est_speedup >= w[0].est_speedup);
            }
        }
        assert_eq!(r.reference.len(), 12);
        assert!(r.reference.iter().any(|x| x.tau == 0.005 && x.context == "128K" && x.map_sparsity == 0.5444));
    }
}
