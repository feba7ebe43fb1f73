//! Inter-layer representation drift and sparse-layer selection.
//!
//! A layer's drift is the mean, over tokens, of the relative L2 change of the
//! residual stream across that layer. Layers are ranked by drift and those in
//! the lower `delta` fraction become eligible for token sparsity.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, SparsePlan};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_DELTA: f64 = 0.5;

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    #[serde(rename = "R")]
    pub drift: Vec<f64>,
    #[serde(rename = "R_hat")]
    pub rank: Vec<f64>,
    pub delta: f64,
    pub sparse_layers: Vec<usize>,
    #[serde(skip, default = "default_epsilon")]
    pub epsilon: f64,
}

impl DriftProfile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// `layer,R,R_hat,sparse` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,R,R_hat,sparse\n");
        for (l, (r, rh)) in self.drift.iter().zip(&self.rank).enumerate() {
            let sparse = self.sparse_layers.contains(&l);
            out.push_str(&format!("{l},{r},{rh},{sparse}\n"));
        }
        out
    }
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Drift across each boundary of `hidden`, a sequence of `[L, d_model]`
/// residual-stream states. `hidden[l]` is the input of layer `l`, so `n`
/// states give `n - 1` drift values.
pub fn compute_drift(hidden: &[Tensor], epsilon: f64) -> Result<Vec<f64>> {
    if hidden.len() < 2 {
        return Err(Error::Parameter(format!(
            "need at least two hidden states, got {}",
            hidden.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let shape = hidden[0].shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("compute_drift", shape, &[0, 0]));
    }
    if let Some(bad) = hidden.iter().find(|h| h.shape() != shape) {
        return Err(Error::shape("compute_drift", shape, bad.shape()));
    }
    let tokens = shape[0];
    Ok(hidden
        .windows(2)
        .map(|pair| {
            let (cur, next) = (&pair[0], &pair[1]);
            let total: f64 = (0..tokens)
                .map(|t| {
                    let a = cur.row(t);
                    let b = next.row(t);
                    let change = l2(a.iter().zip(b).map(|(x, y)| f64::from(*y) - f64::from(*x)));
                    change / (l2(a.iter().map(|&x| f64::from(x))) + epsilon)
                })
                .sum();
            total / tokens as f64
        })
        .collect())
}

/// `R̂_l = |{k : R_k <= R_l}| / n`; layers with `R̂_l <= delta` are sparse.
/// Equal drifts share the larger rank.
pub fn select_sparse_layers(drift: &[f64], delta: f64) -> Result<DriftProfile> {
    if drift.is_empty() {
        return Err(Error::Parameter("drift vector is empty".into()));
    }
    let n = drift.len() as f64;
    let rank: Vec<f64> = drift
        .iter()
        .map(|r| drift.iter().filter(|k| *k <= r).count() as f64 / n)
        .collect();
    let sparse_layers = rank
        .iter()
        .enumerate()
        .filter(|(_, &r)| r <= delta)
        .map(|(l, _)| l)
        .collect();
    Ok(DriftProfile {
        drift: drift.to_vec(),
        rank,
        delta,
        sparse_layers,
        epsilon: DEFAULT_EPSILON,
    })
}

/// Dense forward passes over `prompts`, drift averaged per layer across
/// prompts (in prompt order), then ranked.
pub fn calibrate(model: &Model, prompts: &[Vec<u32>], epsilon: f64, delta: f64) -> Result<DriftProfile> {
    if prompts.is_empty() {
        return Err(Error::Parameter("calibration needs at least one prompt".into()));
    }
    let plan = SparsePlan::dense();
    let mut sum = vec![0.0f64; model.config.n_layers];
    for prompt in prompts {
        let out = model.forward(prompt, &plan)?;
        for (acc, r) in sum.iter_mut().zip(compute_drift(&out.hidden_trace, epsilon)?) {
            *acc += r;
        }
    }
    let mean: Vec<f64> = sum.into_iter().map(|s| s / prompts.len() as f64).collect();
    let mut profile = select_sparse_layers(&mean, delta)?;
    profile.epsilon = epsilon;
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f32>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_states_have_zero_drift() {
        let h = m(&[vec![1.0, -2.0], vec![0.5, 0.5]]);
        assert_eq!(compute_drift(&[h.clone(), h], 1e-6).unwrap(), vec![0.0]);
    }

    #[test]
    fn hand_examples() {
        let r = compute_drift(&[m(&[vec![3.0, 4.0]]), m(&[vec![0.0, 0.0]])], 1e-6).unwrap();
        assert!((r[0] - 5.0 / (5.0 + 1e-6)).abs() < 1e-12);

        let a = m(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let b = m(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let r = compute_drift(&[a, b], 1e-12).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn drift_input_errors() {
        assert!(compute_drift(&[m(&[vec![1.0]])], 1e-6).is_err());
        assert!(compute_drift(&[m(&[vec![1.0]]), m(&[vec![1.0, 2.0]])], 1e-6).is_err());
        assert!(compute_drift(&[m(&[vec![1.0]]), m(&[vec![1.0]])], 0.0).is_err());
    }

    #[test]
    fn rank_examples() {
        let p = select_sparse_layers(&[0.1, 0.2, 0.3, 0.4], 0.5).unwrap();
        assert_eq!(p.rank, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(p.sparse_layers, vec![0, 1]);

        let p = select_sparse_layers(&[0.3; 5], 0.5).unwrap();
        assert!(p.rank.iter().all(|&r| r == 1.0));
        assert!(p.sparse_layers.is_empty());

        let p = select_sparse_layers(&[0.9, 0.1, 0.5, 0.3, 0.7, 0.2], 0.5).unwrap();
        assert_eq!(p.sparse_layers, vec![1, 3, 5]);
        assert!(select_sparse_layers(&[], 0.5).is_err());
    }

    #[test]
    fn profile_json_keys() {
        let p = select_sparse_layers(&[0.1, 0.2], 0.5).unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["R", "R_hat", "delta", "sparse_layers"]);
        let back: DriftProfile = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn ranks_invariant_under_monotone_transform(v in prop::collection::vec(0.0f64..10.0, 1..20)) {
            let p = select_sparse_layers(&v, 0.5).unwrap();
            let w: Vec<f64> = v.iter().map(|x| (x * 3.0 + 1.0).ln()).collect();
            let q = select_sparse_layers(&w, 0.5).unwrap();
            prop_assert_eq!(p.rank, q.rank);
            prop_assert_eq!(p.sparse_layers, q.sparse_layers);
        }

        #[test]
        fn drift_is_scale_invariant(seed: u64, layers in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Offset keeps row norms well away from zero.
            let offset = Tensor::new(vec![6, 8], vec![1.0; 48]).unwrap();
            let states: Vec<Tensor> = (0..layers)
                .map(|_| Tensor::randn(&[6, 8], 1.0, &mut rng).add(&offset).unwrap())
                .collect();
            let base = compute_drift(&states, 1e-6).unwrap();
            for c in [0.1f32, 10.0] {
                let scaled: Vec<Tensor> = states.iter().map(|s| s.scale(c)).collect();
                let r = compute_drift(&scaled, 1e-6).unwrap();
                for (a, b) in base.iter().zip(&r) {
                    prop_assert!((a - b).abs() <= 1e-5);
                }
            }
        }

        #[test]
        fn drift_nonnegative(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let states: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 5], 1.0, &mut rng)).collect();
            prop_assert!(compute_drift(&states, 1e-6).unwrap().iter().all(|&r| r > 0.0));
        }
    }
}
