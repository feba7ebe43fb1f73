use serde::Serialize;

use super::{csv_row, random_tokens, ModeName, RunConfig};
use crate::drift::{calibrate, DriftProfile};
use crate::error::{Error, Result};
use crate::flops::{estimate_flops, AttentionShape, FlopReport};
use crate::model::{Model, SparsePlan};

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub config: RunConfig,
    pub profile: DriftProfile,
}

fn calibration_prompts(config: &RunConfig, model: &Model, len: usize) -> Vec<Vec<u32>> {
    (0..config.prompts as u64)
        .map(|p| random_tokens(config.seed, p, len, model.config.vocab_size))
        .collect()
}

/// Drift profile averaged over `prompts` seeded random prompts.
pub fn cmd_drift(config: &RunConfig) -> Result<DriftReport> {
    let model = config.load_model()?;
    let len = config.first_seq_len()?;
    let prompts = calibration_prompts(config, &model, len);
    let profile = calibrate(&model, &prompts, config.epsilon, config.delta)?;
    Ok(DriftReport {
        config: config.clone(),
        profile,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopsReport {
    pub config: RunConfig,
    pub shape: AttentionShape,
    /// Per-layer budget, `null` for dense layers.
    pub budgets: Vec<Option<usize>>,
    pub report: FlopReport,
}

impl FlopsReport {
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        let mut out = String::from("metric,value\n");
        for (name, v) in [
            ("dense_flops", r.dense_flops),
            ("sparse_flops", r.sparse_flops),
            ("overhead_flops", r.overhead_flops),
            ("scoring_flops", r.scoring_flops),
            ("indexing_flops", r.indexing_flops),
            ("gather_scatter_flops", r.gather_scatter_flops),
            ("est_speedup", r.est_speedup),
            ("attention_ratio", r.attention_ratio),
            ("overhead_fraction", r.overhead_fraction),
            ("avg_map_sparsity", r.avg_map_sparsity),
        ] {
            out += &csv_row(&[name.to_string(), v.to_string()]);
        }
        for l in &r.map_sparsity {
            out += &csv_row(&[format!("map_sparsity.layer{}", l.layer), l.map_sparsity.to_string()]);
        }
        out
    }
}

/// FLOP accounting at the first configured length.
///
/// Sparse layers come from drift calibration. Budgets are the explicit
/// `k_keep` list when given (one value is broadcast to every sparse layer),
/// otherwise whatever a forward pass in the configured mode realises.
pub fn cmd_flops(config: &RunConfig) -> Result<FlopsReport> {
    let model = config.load_model()?;
    let len = config.first_seq_len()?;
    let prompts = calibration_prompts(config, &model, len);
    let profile = calibrate(&model, &prompts, config.epsilon, config.delta)?;
    let layers = &profile.sparse_layers;

    let mut budgets = vec![None; model.config.n_layers];
    match &config.k_keep {
        Some(ks) => {
            if ks.len() != 1 && ks.len() != layers.len() {
                return Err(Error::Config(format!(
                    "k_keep lists {} values for {} sparse layers",
                    ks.len(),
                    layers.len()
                )));
            }
            if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > len) {
                return Err(Error::Config(format!("k_keep {k} outside [1, {len}]")));
            }
            for (i, &l) in layers.iter().enumerate() {
                budgets[l] = Some(if ks.len() == 1 { ks[0] } else { ks[i] });
            }
        }
        None => {
            let plan = match config.mode {
                ModeName::Dense => SparsePlan::dense(),
                ModeName::Dynamic => {
                    let tau = *config
                        .taus()
                        .first()
                        .ok_or_else(|| Error::Config("dynamic mode needs a tau value".into()))?;
                    SparsePlan::dynamic(layers.iter().copied(), tau)
                }
                ModeName::Fixed => {
                    let s = *config
                        .fixed_ratios()
                        .first()
                        .ok_or_else(|| Error::Config("fixed mode needs an s_fixed value".into()))?;
                    SparsePlan::fixed(layers.iter().copied(), s)
                }
            }
            .with_coverage(config.coverage());
            let out = model.forward(&prompts[0], &plan)?;
            for s in out.stats.iter().filter(|s| s.sparse) {
                budgets[s.layer] = Some(s.k_keep);
            }
        }
    }

    let shape = AttentionShape {
        seq_len: len,
        d_head: model.config.d_head,
        n_heads: model.config.n_heads,
        last_q: config.last_q,
        kernel: config.kernel,
    };
    let report = estimate_flops(&shape, &budgets);
    Ok(FlopsReport {
        config: config.clone(),
        shape,
        budgets,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Command;

    #[test]
    fn default_drift_selects_half_the_layers() {
        let cfg = RunConfig {
            seq_len: Some(vec![32]),
            ..RunConfig::default()
        }
        .resolve(Command::Drift)
        .unwrap();
        let r = cmd_drift(&cfg).unwrap();
        assert_eq!(r.profile.drift.len(), 4);
        assert_eq!(r.profile.sparse_layers.len(), 2);
        let json = r.profile.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["R", "R_hat", "delta", "sparse_layers"]);
    }

    #[test]
    fn explicit_half_budget_gives_ratio_four() {
        let cfg = RunConfig {
            seq_len: Some(vec![64]),
            k_keep: Some(vec![32]),
            ..RunConfig::default()
        }
        .resolve(Command::Flops)
        .unwrap();
        let r = cmd_flops(&cfg).unwrap();
        assert_eq!(r.report.attention_ratio, 4.0);
        assert_eq!(r.budgets.iter().flatten().count(), 2);
        assert!(r.to_csv().starts_with("metric,value\ndense_flops,"));
    }

    #[test]
    fn mismatched_budget_list_is_a_config_error() {
        let cfg = RunConfig {
            seq_len: Some(vec![16]),
            k_keep: Some(vec![4, 4, 4]),
            ..RunConfig::default()
        }
        .resolve(Command::Flops)
        .unwrap();
        assert!(matches!(cmd_flops(&cfg), Err(Error::Config(_))));
        let cfg = RunConfig {
            k_keep: Some(vec![17]),
            ..cfg
        };
        assert!(matches!(cmd_flops(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn realised_budgets_match_mode() {
        let cfg = RunConfig {
            seq_len: Some(vec![40]),
            mode: ModeName::Fixed,
            ..RunConfig::default()
        }
        .resolve(Command::Flops)
        .unwrap();
        let r = cmd_flops(&cfg).unwrap();
        assert!(r.budgets.iter().flatten().all(|&k| k == 28));
        let dense = cmd_flops(&RunConfig { mode: ModeName::Dense, ..cfg }).unwrap();
        assert!(dense.budgets.iter().all(Option::is_none));
        assert_eq!(dense.report.est_speedup, 1.0);
    }
}
