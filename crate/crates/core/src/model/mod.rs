//! A small pre-norm decoder-only transformer used to exercise token-sparse
//! attention end to end.
//!
//! Projections are bias-free, so a token that no head selected contributes
//! exactly nothing through `W_O` and keeps its residual input.

mod checkpoint;
mod rope;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention_heads, token_sparse_attention, DenseCausal, HeadTensors, TokenSelection};
use crate::coverage::{select_for_layer, BudgetRule, CoverageParams};
use crate::error::{Error, Result};
use crate::flops::{layer_flops, map_sparsity, AttentionShape, LayerFlops};
use crate::tensor::{matmul, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use rope::apply_rope;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            n_kv_heads: 2,
            d_model: 128,
            d_head: 16,
            d_ff: 256,
            vocab_size: 512,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.n_kv_heads,
            self.d_model,
            self.d_head,
            self.d_ff,
            self.vocab_size,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!("d_head {} must be even", self.d_head)));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("rope_theta and norm_eps must be positive".into()));
        }
        Ok(())
    }

    fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

/// Dense, dynamic-coverage or fixed-ratio budgets.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SparseMode {
    #[default]
    Dense,
    Dynamic {
        tau: f64,
    },
    Fixed {
        sparsity: f64,
    },
}

/// Which layers run token-sparse attention and how they pick tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePlan {
    pub sparse_layers: BTreeSet<usize>,
    pub mode: SparseMode,
    pub coverage: CoverageParams,
}

impl SparsePlan {
    pub fn dense() -> Self {
        Self {
            sparse_layers: BTreeSet::new(),
            mode: SparseMode::Dense,
            coverage: CoverageParams::default(),
        }
    }

    pub fn dynamic(layers: impl IntoIterator<Item = usize>, tau: f64) -> Self {
        Self {
            sparse_layers: layers.into_iter().collect(),
            mode: SparseMode::Dynamic { tau },
            coverage: CoverageParams::default(),
        }
    }

    pub fn fixed(layers: impl IntoIterator<Item = usize>, sparsity: f64) -> Self {
        Self {
            sparse_layers: layers.into_iter().collect(),
            mode: SparseMode::Fixed { sparsity },
            coverage: CoverageParams::default(),
        }
    }

    pub fn with_coverage(mut self, coverage: CoverageParams) -> Self {
        self.coverage = coverage;
        self
    }

    fn rule_for(&self, layer: usize) -> Option<BudgetRule> {
        if !self.sparse_layers.contains(&layer) {
            return None;
        }
        match self.mode {
            SparseMode::Dense => None,
            SparseMode::Dynamic { tau } => Some(BudgetRule::Coverage(tau)),
            SparseMode::Fixed { sparsity } => Some(BudgetRule::Fixed(sparsity)),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let Some(&l) = self.sparse_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!("sparse layer {l} >= n_layers {n_layers}")));
        }
        match self.mode {
            SparseMode::Dynamic { tau } if !(0.0..=1.0).contains(&tau) => {
                Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")))
            }
            SparseMode::Fixed { sparsity } if !(0.0..1.0).contains(&sparsity) => {
                Err(Error::Config(format!("fixed sparsity must lie in [0, 1), got {sparsity}")))
            }
            _ if self.coverage.last_q == 0 || self.coverage.kernel % 2 == 0 => Err(Error::Config(
                "last_q must be positive and kernel odd".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub sparse: bool,
    pub seq_len: usize,
    pub k_keep: usize,
    pub map_sparsity: f64,
    pub flops: LayerFlops,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[L, vocab]`.
    pub logits: Tensor,
    /// Residual stream entering each layer, followed by the last layer's
    /// output: `n_layers + 1` tensors of shape `[L, d_model]`.
    pub hidden_trace: Vec<Tensor>,
    pub stats: Vec<LayerStats>,
}

impl ForwardOutput {
    /// Residual stream after the last layer, before the final norm.
    pub fn final_hidden(&self) -> &Tensor {
        self.hidden_trace.last().expect("trace holds at least the embeddings")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

/// Row-wise RMS normalisation with a learned gain.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.numel() != d {
        return Err(Error::shape("rms_norm", x.shape(), gain.shape()));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / d as f64;
        let inv = (1.0 / (ms + eps).sqrt()) as f32;
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `[L, heads·d]` → `[heads, L, d]`.
fn split_heads(x: &Tensor, heads: usize, d: usize) -> Result<Tensor> {
    let len = x.rows();
    let mut out = vec![0.0f32; heads * len * d];
    for t in 0..len {
        let row = x.row(t);
        for h in 0..heads {
            out[(h * len + t) * d..(h * len + t + 1) * d].copy_from_slice(&row[h * d..(h + 1) * d]);
        }
    }
    Tensor::new(vec![heads, len, d], out)
}

/// `[heads, L, d]` → `[L, heads·d]`.
fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (heads, len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0f32; heads * len * d];
    for h in 0..heads {
        for t in 0..len {
            out[t * heads * d + h * d..t * heads * d + (h + 1) * d]
                .copy_from_slice(&x.data()[(h * len + t) * d..(h * len + t + 1) * d]);
        }
    }
    Tensor::new(vec![len, heads * d], out)
}

impl Model {
    /// Random weights with `1/√fan_in` scaling and unit norm gains. The
    /// query/key projections get an extra gain of 2 so attention maps are
    /// peaked enough for coverage budgets to bite.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let std = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            layers.push(LayerWeights {
                attn_norm: Tensor::new(vec![c.d_model], vec![1.0; c.d_model])?,
                wq: Tensor::randn(&[c.d_model, c.d_model], 2.0 * std(c.d_model), &mut rng),
                wk: Tensor::randn(&[c.d_model, c.kv_width()], 2.0 * std(c.d_model), &mut rng),
                wv: Tensor::randn(&[c.d_model, c.kv_width()], std(c.d_model), &mut rng),
                wo: Tensor::randn(&[c.d_model, c.d_model], std(c.d_model), &mut rng),
                ffn_norm: Tensor::new(vec![c.d_model], vec![1.0; c.d_model])?,
                w_gate: Tensor::randn(&[c.d_model, c.d_ff], std(c.d_model), &mut rng),
                w_up: Tensor::randn(&[c.d_model, c.d_ff], std(c.d_model), &mut rng),
                w_down: Tensor::randn(&[c.d_ff, c.d_model], std(c.d_ff), &mut rng),
            });
        }
        let weights = ModelWeights {
            embed: Tensor::randn(&[c.vocab_size, c.d_model], 1.0, &mut rng),
            layers,
            final_norm: Tensor::new(vec![c.d_model], vec![1.0; c.d_model])?,
            lm_head: Tensor::randn(&[c.d_model, c.vocab_size], std(c.d_model), &mut rng),
        };
        Ok(Self { config, weights })
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(Error::Parameter(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(self.weights.embed.row(t));
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    fn layer(&self, index: usize) -> Result<&LayerWeights> {
        self.weights
            .layers
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("layer {index} out of range")))
    }

    /// Normalised, projected and rotated Q/K/V for layer `index`.
    pub fn project_heads(&self, x: &Tensor, index: usize) -> Result<HeadTensors> {
        let c = &self.config;
        let w = self.layer(index)?;
        let h = rms_norm(x, &w.attn_norm, c.norm_eps)?;
        let positions: Vec<usize> = (0..x.rows()).collect();
        let rotate = |t: Tensor, heads: usize| -> Result<Tensor> {
            let t = split_heads(&t, heads, c.d_head)?;
            let rotated = (0..heads)
                .map(|i| apply_rope(&t.slice_outer(i), &positions, c.rope_theta))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&rotated)
        };
        let q = rotate(matmul(&h, &w.wq)?, c.n_heads)?;
        let k = rotate(matmul(&h, &w.wk)?, c.n_kv_heads)?;
        let v = split_heads(&matmul(&h, &w.wv)?, c.n_kv_heads, c.d_head)?;
        HeadTensors::new(q, k, v)
    }

    /// Per-head attention output `[H, L, d_head]` and, for sparse layers, the
    /// selection that produced it.
    pub fn attend(
        &self,
        heads: &HeadTensors,
        index: usize,
        plan: &SparsePlan,
    ) -> Result<(Tensor, Option<TokenSelection>)> {
        match plan.rule_for(index) {
            None => Ok((dense_attention_heads(heads)?, None)),
            Some(rule) => {
                let selection = select_for_layer(heads, rule, &plan.coverage)?;
                let out = token_sparse_attention(heads, &selection, &DenseCausal)?;
                Ok((out, Some(selection)))
            }
        }
    }

    /// `x + concat_heads(attn)·W_O`.
    pub fn attention_residual(&self, x: &Tensor, attn: &Tensor, index: usize) -> Result<Tensor> {
        let w = self.layer(index)?;
        x.add(&matmul(&merge_heads(attn)?, &w.wo)?)
    }

    /// `x + W_down(silu(W_gate·n) ⊙ W_up·n)` with `n = rms_norm(x)`.
    pub fn feed_forward_residual(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        let w = self.layer(index)?;
        let n = rms_norm(x, &w.ffn_norm, self.config.norm_eps)?;
        let gate = matmul(&n, &w.w_gate)?;
        let mut up = matmul(&n, &w.w_up)?;
        for (u, g) in up.data_mut().iter_mut().zip(gate.data()) {
            *u *= silu(*g);
        }
        x.add(&matmul(&up, &w.w_down)?)
    }

    pub fn layer_forward(&self, x: &Tensor, index: usize, plan: &SparsePlan) -> Result<(Tensor, LayerStats)> {
        let heads = self.project_heads(x, index)?;
        let (attn, selection) = self.attend(&heads, index, plan)?;
        let mid = self.attention_residual(x, &attn, index)?;
        let out = self.feed_forward_residual(&mid, index)?;

        let len = x.rows();
        let k_keep = selection.as_ref().map(|s| s.k_keep);
        let shape = AttentionShape {
            seq_len: len,
            d_head: self.config.d_head,
            n_heads: self.config.n_heads,
            last_q: plan.coverage.last_q,
            kernel: plan.coverage.kernel,
        };
        let stats = LayerStats {
            layer: index,
            sparse: selection.is_some(),
            seq_len: len,
            k_keep: k_keep.unwrap_or(len),
            map_sparsity: k_keep.map_or(0.0, |k| map_sparsity(k, len)),
            flops: layer_flops(&shape, k_keep),
        };
        Ok((out, stats))
    }

    /// Full prefill pass. Sparse layers re-score and re-budget from their own
    /// Q/K; nothing carries over between layers except the residual stream.
    pub fn forward(&self, tokens: &[u32], plan: &SparsePlan) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::Parameter("empty token sequence".into()));
        }
        plan.validate(self.config.n_layers)?;
        let mut x = self.embed(tokens)?;
        let mut hidden_trace = Vec::with_capacity(self.config.n_layers + 1);
        let mut stats = Vec::with_capacity(self.config.n_layers);
        for index in 0..self.config.n_layers {
            let (next, s) = self.layer_forward(&x, index, plan)?;
            hidden_trace.push(x);
            stats.push(s);
            x = next;
        }
        let normed = rms_norm(&x, &self.weights.final_norm, self.config.norm_eps)?;
        let logits = matmul(&normed, &self.weights.lm_head)?;
        hidden_trace.push(x);
        Ok(ForwardOutput {
            logits,
            hidden_trace,
            stats,
        })
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let w = &self.weights;
        let mut out = vec![("embed".to_string(), &w.embed)];
        for (i, l) in w.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &w.final_norm));
        out.push(("lm_head".to_string(), &w.lm_head));
        out
    }

    /// Expected `(name, shape)` of every tensor, in checkpoint order.
    pub(crate) fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let c = config;
        let mut out = vec![("embed".to_string(), vec![c.vocab_size, c.d_model])];
        for i in 0..c.n_layers {
            for (name, shape) in [
                ("attn_norm", vec![c.d_model]),
                ("wq", vec![c.d_model, c.d_model]),
                ("wk", vec![c.d_model, c.kv_width()]),
                ("wv", vec![c.d_model, c.kv_width()]),
                ("wo", vec![c.d_model, c.d_model]),
                ("ffn_norm", vec![c.d_model]),
                ("w_gate", vec![c.d_model, c.d_ff]),
                ("w_up", vec![c.d_model, c.d_ff]),
                ("w_down", vec![c.d_ff, c.d_model]),
            ] {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("final_norm".to_string(), vec![c.d_model]));
        out.push(("lm_head".to_string(), vec![c.d_model, c.vocab_size]));
        out
    }

    /// Rebuilds a model from tensors given in [`Model::tensor_layout`] order.
    pub(crate) fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let mut next = || it.next().ok_or_else(|| Error::Checkpoint("too few tensors".into()));
        let embed = next()?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: next()?,
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
                ffn_norm: next()?,
                w_gate: next()?,
                w_up: next()?,
                w_down: next()?,
            });
        }
        let final_norm = next()?;
        let lm_head = next()?;
        Ok(Self {
            config,
            weights: ModelWeights {
                embed,
                layers,
                final_norm,
                lm_head,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::masked_sparse_oracle;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_model: 32,
            d_head: 8,
            d_ff: 48,
            vocab_size: 64,
            ..ModelConfig::default()
        }
    }

    fn tokens(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
    }

    #[test]
    fn config_validation() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig { d_model: 100, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { n_kv_heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_and_merge_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[5, 12], 1.0, &mut rng);
        let split = split_heads(&x, 3, 4).unwrap();
        assert_eq!(split.slice_outer(1).row(2), &x.row(2)[4..8]);
        assert_eq!(merge_heads(&split).unwrap(), x);
    }

    /// Straight-line dense forward written independently of the runtime's
    /// helpers (explicit per-head loops, no HeadTensors).
    fn reference_forward(model: &Model, toks: &[u32]) -> Tensor {
        let c = &model.config;
        let len = toks.len();
        let mut x = model.embed(toks).unwrap();
        let group = c.n_heads / c.n_kv_heads;
        let positions: Vec<usize> = (0..len).collect();
        for w in &model.weights.layers {
            let h = rms_norm(&x, &w.attn_norm, c.norm_eps).unwrap();
            let q = matmul(&h, &w.wq).unwrap();
            let k = matmul(&h, &w.wk).unwrap();
            let v = matmul(&h, &w.wv).unwrap();
            let mut concat = vec![0.0f32; len * c.d_model];
            for head in 0..c.n_heads {
                let kv = head / group;
                let cols = |t: &Tensor, hh: usize| {
                    let rows: Vec<Vec<f32>> = (0..len)
                        .map(|r| t.row(r)[hh * c.d_head..(hh + 1) * c.d_head].to_vec())
                        .collect();
                    Tensor::from_rows(&rows).unwrap()
                };
                let qh = apply_rope(&cols(&q, head), &positions, c.rope_theta).unwrap();
                let kh = apply_rope(&cols(&k, kv), &positions, c.rope_theta).unwrap();
                let vh = cols(&v, kv);
                let o = crate::attention::dense_causal_attention(&qh, &kh, &vh).unwrap();
                for t in 0..len {
                    concat[t * c.d_model + head * c.d_head..t * c.d_model + (head + 1) * c.d_head]
                        .copy_from_slice(o.row(t));
                }
            }
            let concat = Tensor::new(vec![len, c.d_model], concat).unwrap();
            x = x.add(&matmul(&concat, &w.wo).unwrap()).unwrap();
            let n = rms_norm(&x, &w.ffn_norm, c.norm_eps).unwrap();
            let g = matmul(&n, &w.w_gate).unwrap();
            let u = matmul(&n, &w.w_up).unwrap();
            let act: Vec<f32> = g.data().iter().zip(u.data()).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let act = Tensor::new(vec![len, c.d_ff], act).unwrap();
            x = x.add(&matmul(&act, &w.w_down).unwrap()).unwrap();
        }
        let n = rms_norm(&x, &model.weights.final_norm, c.norm_eps).unwrap();
        matmul(&n, &model.weights.lm_head).unwrap()
    }

    #[test]
    fn dense_runtime_matches_straight_line_reference() {
        let model = Model::init_random(tiny_config(), 11).unwrap();
        let toks = tokens(1, 19, 64);
        let out = model.forward(&toks, &SparsePlan::dense()).unwrap();
        let reference = reference_forward(&model, &toks);
        assert!(out.logits.max_abs_diff(&reference).unwrap() <= 1e-5);
        assert_eq!(out.hidden_trace.len(), 3);
        assert!(out.stats.iter().all(|s| !s.sparse && s.k_keep == 19));
    }

    #[test]
    fn zero_tau_matches_dense() {
        let model = Model::init_random(tiny_config(), 12).unwrap();
        let toks = tokens(2, 40, 64);
        let dense = model.forward(&toks, &SparsePlan::dense()).unwrap();
        let sparse = model.forward(&toks, &SparsePlan::dynamic([0, 1], 0.0)).unwrap();
        assert!(dense.logits.max_abs_diff(&sparse.logits).unwrap() <= 1e-5);
        assert!(sparse.stats.iter().all(|s| s.sparse && s.k_keep == 40));
    }

    #[test]
    fn fixed_plan_reports_rounded_half() {
        let model = Model::init_random(tiny_config(), 13).unwrap();
        let toks = tokens(3, 37, 64);
        let out = model.forward(&toks, &SparsePlan::fixed([1], 0.5)).unwrap();
        assert!(!out.stats[0].sparse);
        assert_eq!(out.stats[1].k_keep, (37.0f64 / 2.0).round() as usize);
    }

    #[test]
    fn dynamic_budgets_stay_in_bounds() {
        let model = Model::init_random(tiny_config(), 14).unwrap();
        let toks = tokens(4, 64, 64);
        for tau in [0.005, 0.1, 0.5, 0.99, 1.0] {
            let out = model.forward(&toks, &SparsePlan::dynamic([0, 1], tau)).unwrap();
            for s in &out.stats {
                assert!(s.k_keep >= 1 && s.k_keep <= 64);
            }
        }
    }

    #[test]
    fn sparse_layer_equals_oracle_substitution() {
        let model = Model::init_random(tiny_config(), 15).unwrap();
        let toks = tokens(5, 33, 64);
        let plan = SparsePlan::dynamic([1], 0.3);
        let out = model.forward(&toks, &plan).unwrap();

        let x0 = model.embed(&toks).unwrap();
        let (x1, _) = model.layer_forward(&x0, 0, &plan).unwrap();
        let heads = model.project_heads(&x1, 1).unwrap();
        let selection = select_for_layer(&heads, BudgetRule::Coverage(0.3), &plan.coverage).unwrap();
        let oracle = (0..heads.n_heads())
            .map(|h| masked_sparse_oracle(&heads.query(h), &heads.key(h), &heads.value(h), &selection.per_head[h]))
            .collect::<Result<Vec<_>>>()
            .unwrap();
        let mid = model.attention_residual(&x1, &Tensor::stack(&oracle).unwrap(), 1).unwrap();
        let x2 = model.feed_forward_residual(&mid, 1).unwrap();
        assert!(out.final_hidden().max_abs_diff(&x2).unwrap() <= 1e-5);
    }

    #[test]
    fn budgets_are_recomputed_per_layer() {
        let model = Model::init_random(ModelConfig::default(), 16).unwrap();
        let toks = tokens(6, 128, 512);
        let plan = SparsePlan::dynamic(0..4, 0.2);
        let out = model.forward(&toks, &plan).unwrap();
        for s in &out.stats {
            let heads = model.project_heads(&out.hidden_trace[s.layer], s.layer).unwrap();
            let sel = select_for_layer(&heads, BudgetRule::Coverage(0.2), &plan.coverage).unwrap();
            assert_eq!(sel.k_keep, s.k_keep);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Model::init_random(tiny_config(), 17).unwrap();
        let b = Model::init_random(tiny_config(), 17).unwrap();
        let toks = tokens(7, 25, 64);
        let plan = SparsePlan::dynamic([0], 0.1);
        let oa = a.forward(&toks, &plan).unwrap();
        let ob = b.forward(&toks, &plan).unwrap();
        assert_eq!(oa.logits, ob.logits);
        assert_eq!(oa.stats, ob.stats);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Model::init_random(tiny_config(), 18).unwrap();
        assert!(model.forward(&[64], &SparsePlan::dense()).is_err());
        assert!(model.forward(&[], &SparsePlan::dense()).is_err());
        assert!(model.forward(&[1, 2], &SparsePlan::dynamic([2], 0.1)).is_err());
        assert!(model.forward(&[1, 2], &SparsePlan::dynamic([0], 1.5)).is_err());
    }
}
