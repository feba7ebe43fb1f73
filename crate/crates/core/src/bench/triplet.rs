use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{csv_row, random_tokens, relative_l2, spearman, RunConfig};
use crate::drift::{compute_drift, select_sparse_layers};
use crate::error::{Error, Result};
use crate::model::{Model, SparsePlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct TripletRow {
    pub run: usize,
    pub layers: [usize; 3],
    /// Mean normalised drift rank of the three layers.
    pub mean_drift: f64,
    /// Relative L2 distance of the final hidden state from the dense pass.
    pub output_deviation: f64,
    /// The same measurement with coverage 0 on the same layers.
    pub control_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TripletReport {
    pub config: RunConfig,
    pub tau: f64,
    pub drift_rank: Vec<f64>,
    pub rows: Vec<TripletRow>,
    /// Spearman correlation of `mean_drift` against `output_deviation`;
    /// 0 when undefined.
    pub spearman_rho: f64,
    pub correlation_defined: bool,
}

impl TripletReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,layers,mean_drift,output_deviation,control_deviation\n");
        for r in &self.rows {
            out += &csv_row(&[
                r.run.to_string(),
                format!("{}-{}-{}", r.layers[0], r.layers[1], r.layers[2]),
                r.mean_drift.to_string(),
                r.output_deviation.to_string(),
                r.control_deviation.to_string(),
            ]);
        }
        out += &format!("# spearman_rho={}\n", self.spearman_rho);
        out
    }
}

/// Runs layers `start..` on `x` under `plan` and returns the final residual
/// stream.
fn forward_from(model: &Model, mut x: Tensor, start: usize, plan: &SparsePlan) -> Result<Tensor> {
    for index in start..model.config.n_layers {
        x = model.layer_forward(&x, index, plan)?.0;
    }
    Ok(x)
}

/// Sparsifies `runs` random layer triplets at coverage `tau[0]` and relates
/// each triplet's mean drift rank to the resulting output deviation.
pub fn cmd_triplet(config: &RunConfig) -> Result<TripletReport> {
    let model = config.load_model()?;
    let n_layers = model.config.n_layers;
    if n_layers < 4 {
        return Err(Error::Config(format!("triplet needs at least 4 layers, model has {n_layers}")));
    }
    let tau = *config
        .taus()
        .first()
        .ok_or_else(|| Error::Config("triplet needs a tau value".into()))?;
    let len = config.first_seq_len()?;
    let tokens = random_tokens(config.seed, 0, len, model.config.vocab_size);
    let dense = model.forward(&tokens, &SparsePlan::dense())?;
    let reference = dense.final_hidden();
    let rank = select_sparse_layers(&compute_drift(&dense.hidden_trace, config.epsilon)?, config.delta)?.rank;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let mut layers: Vec<usize> = sample(&mut rng, n_layers, 3).into_vec();
        layers.sort_unstable();
        let start = layers[0];
        // Layers before the first sparse one are dense, so their output is
        // the dense trace.
        let deviation = |t: f64| -> Result<f64> {
            let plan = SparsePlan::dynamic(layers.iter().copied(), t).with_coverage(config.coverage());
            let out = forward_from(&model, dense.hidden_trace[start].clone(), start, &plan)?;
            Ok(relative_l2(&out, reference))
        };
        rows.push(TripletRow {
            run,
            layers: [layers[0], layers[1], layers[2]],
            mean_drift: layers.iter().map(|&l| rank[l]).sum::<f64>() / 3.0,
            output_deviation: deviation(tau)?,
            control_deviation: deviation(0.0)?,
        });
    }

    let x: Vec<f64> = rows.iter().map(|r| r.mean_drift).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.output_deviation).collect();
    let rho = spearman(&x, &y);
    Ok(TripletReport {
        config: config.clone(),
        tau,
        drift_rank: rank,
        rows,
        spearman_rho: rho.unwrap_or(0.0),
        correlation_defined: rho.is_some(),
    })
}
