use serde::Serialize;

use super::{csv_row, random_tokens, relative_l2, RunConfig};
use crate::drift::{compute_drift, select_sparse_layers};
use crate::error::Result;
use crate::flops::{estimate_flops, AttentionShape};
use crate::model::{ForwardOutput, Model, SparsePlan};

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    /// `dynamic` or `fixed`.
    pub mode: &'static str,
    /// `tau` for dynamic rows, `s` for fixed rows.
    pub param: f64,
    pub k_keep: Vec<usize>,
    pub map_sparsity: f64,
    pub est_speedup: f64,
    /// Relative L2 distance of the logits from the dense pass.
    pub output_deviation: f64,
}

/// A published (mode, parameter) → map-sparsity measurement.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceSparsity {
    pub mode: &'static str,
    pub param: f64,
    pub map_sparsity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub config: RunConfig,
    pub seq_len: usize,
    pub sparse_layers: Vec<usize>,
    pub rows: Vec<CompareRow>,
    pub reference: Vec<ReferenceSparsity>,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,param,map_sparsity,est_speedup,output_deviation\n");
        for r in &self.rows {
            out += &csv_row(&[
                r.mode.to_string(),
                r.param.to_string(),
                r.map_sparsity.to_string(),
                r.est_speedup.to_string(),
                r.output_deviation.to_string(),
            ]);
        }
        out
    }

    pub fn row(&self, mode: &str, param: f64) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.mode == mode && r.param == param)
    }
}

fn summarize(
    model: &Model,
    config: &RunConfig,
    mode: &'static str,
    param: f64,
    out: &ForwardOutput,
    dense: &ForwardOutput,
) -> CompareRow {
    let len = dense.logits.rows();
    let shape = AttentionShape {
        seq_len: len,
        d_head: model.config.d_head,
        n_heads: model.config.n_heads,
        last_q: config.last_q,
        kernel: config.kernel,
    };
    let budgets: Vec<Option<usize>> = out.stats.iter().map(|s| s.sparse.then_some(s.k_keep)).collect();
    let flops = estimate_flops(&shape, &budgets);
    CompareRow {
        mode,
        param,
        k_keep: budgets.iter().flatten().copied().collect(),
        map_sparsity: flops.avg_map_sparsity,
        est_speedup: flops.est_speedup,
        output_deviation: relative_l2(&out.logits, &dense.logits),
    }
}

/// Dynamic coverage at each `tau` next to fixed-ratio budgets at each `s`,
/// on the same input and the same drift-selected sparse layers.
pub fn cmd_fixed_vs_dynamic(config: &RunConfig) -> Result<CompareReport> {
    let model = config.load_model()?;
    let len = config.first_seq_len()?;
    let tokens = random_tokens(config.seed, 0, len, model.config.vocab_size);
    let dense = model.forward(&tokens, &SparsePlan::dense())?;
    let profile = select_sparse_layers(&compute_drift(&dense.hidden_trace, config.epsilon)?, config.delta)?;
    let layers = profile.sparse_layers.clone();

    let mut rows = Vec::new();
    for &tau in config.taus() {
        let plan = SparsePlan::dynamic(layers.iter().copied(), tau).with_coverage(config.coverage());
        let out = model.forward(&tokens, &plan)?;
        rows.push(summarize(&model, config, "dynamic", tau, &out, &dense));
    }
    for &s in config.fixed_ratios() {
        let plan = SparsePlan::fixed(layers.iter().copied(), s).with_coverage(config.coverage());
        let out = model.forward(&tokens, &plan)?;
        rows.push(summarize(&model, config, "fixed", s, &out, &dense));
    }
    Ok(CompareReport {
        config: config.clone(),
        seq_len: len,
        sparse_layers: layers,
        rows,
        reference: vec![
            ReferenceSparsity { mode: "dynamic", param: 0.005, map_sparsity: 0.5444 },
            ReferenceSparsity { mode: "dynamic", param: 0.010, map_sparsity: 0.6736 },
            ReferenceSparsity { mode: "fixed", param: 0.3, map_sparsity: 0.5096 },
            ReferenceSparsity { mode: "fixed", param: 0.5, map_sparsity: 0.7495 },
        ],
    })
}
