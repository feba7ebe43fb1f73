//! Per-head attention kernels.
//!
//! [`token_sparse_attention`] is the fast path: gather each head's selected
//! rows of Q/K/V into dense compressed tensors, run an ordinary causal
//! attention backend on them, then scatter the compressed output back into a
//! zero-initialised `L × d` tensor. [`masked_sparse_oracle`] computes the same
//! quantity the slow way, on the full `L × L` map with a hard mask, and is the
//! ground truth the fast path is tested against.

use crate::error::{Error, Result};
use crate::tensor::{gather_rows, matmul, scatter_rows, softmax_rows, validate_indices, Tensor};

/// Query/key/value projections for one layer, laid out `[heads, L, d_head]`.
///
/// Key and value may carry fewer heads than query (grouped-query attention);
/// query head `h` reads key/value head `h / (n_heads / n_kv_heads)`.
#[derive(Debug, Clone)]
pub struct HeadTensors {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl HeadTensors {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        if q.rank() != 3 || k.rank() != 3 || k.shape() != v.shape() {
            return Err(Error::shape("HeadTensors", q.shape(), k.shape()));
        }
        let (h, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let hkv = k.shape()[0];
        if hkv == 0 || h % hkv != 0 || k.shape()[1] != l || k.shape()[2] != d {
            return Err(Error::shape("HeadTensors", q.shape(), k.shape()));
        }
        Ok(Self { q, k, v })
    }

    pub fn n_heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn n_kv_heads(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn d_head(&self) -> usize {
        self.q.shape()[2]
    }

    /// Key/value head serving query head `h`.
    pub fn kv_group(&self, h: usize) -> usize {
        h / (self.n_heads() / self.n_kv_heads())
    }

    pub fn query(&self, h: usize) -> Tensor {
        self.q.slice_outer(h)
    }

    pub fn key(&self, h: usize) -> Tensor {
        self.k.slice_outer(self.kv_group(h))
    }

    pub fn value(&self, h: usize) -> Tensor {
        self.v.slice_outer(self.kv_group(h))
    }
}

/// Per-head retained token indices for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelection {
    /// Coverage threshold that produced the budget; `None` for budgets that
    /// were not coverage-derived (fixed ratio, full selection).
    pub tau: Option<f64>,
    pub k_keep: usize,
    pub per_head: Vec<Vec<usize>>,
    pub forced: Vec<usize>,
}

impl TokenSelection {
    /// Every token in every head.
    pub fn full(n_heads: usize, seq_len: usize) -> Self {
        Self {
            tau: None,
            k_keep: seq_len,
            per_head: vec![(0..seq_len).collect(); n_heads],
            forced: Vec::new(),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.per_head.len()
    }

    /// Checks the selection invariants against a layer of `n_heads` heads and
    /// `seq_len` tokens.
    pub fn validate(&self, n_heads: usize, seq_len: usize) -> Result<()> {
        if self.per_head.len() != n_heads {
            return Err(Error::shape(
                "TokenSelection",
                &[self.per_head.len()],
                &[n_heads],
            ));
        }
        if self.k_keep < self.forced.len().max(1) || self.k_keep > seq_len {
            return Err(Error::Index(format!(
                "k_keep {} outside [max(1, |forced|)={}, {seq_len}]",
                self.k_keep,
                self.forced.len().max(1)
            )));
        }
        for (h, idx) in self.per_head.iter().enumerate() {
            validate_indices(idx, seq_len)?;
            if idx.len() != self.k_keep {
                return Err(Error::Index(format!(
                    "head {h} keeps {} tokens, expected {}",
                    idx.len(),
                    self.k_keep
                )));
            }
            if let Some(f) = self.forced.iter().find(|f| idx.binary_search(f).is_err()) {
                return Err(Error::Index(format!("head {h} is missing forced token {f}")));
            }
        }
        Ok(())
    }
}

/// An exact causal attention kernel over `[L, d]` query/key/value rows.
///
/// [`token_sparse_attention`] hands it compressed tensors; any kernel that
/// implements plain lower-triangular causal attention can be dropped in.
pub trait AttentionBackend {
    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor>;
}

impl<F> AttentionBackend for F
where
    F: Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
{
    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        self(q, k, v)
    }
}

/// The reference backend: [`dense_causal_attention`].
#[derive(Debug, Clone, Copy, Default)]
pub struct DenseCausal;

impl AttentionBackend for DenseCausal {
    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        dense_causal_attention(q, k, v)
    }
}

fn check_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    if q.rank() != 2 || q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    Ok((q.shape()[0], q.shape()[1]))
}

fn scaled_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.cols();
    Ok(matmul(q, &k.transpose()?)?.scale(1.0 / (d as f32).sqrt()))
}

/// `softmax(QKᵀ/√d + causal mask)·V` for one head.
pub fn dense_causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (len, _) = check_head(q, k, v)?;
    let scores = scaled_scores(q, k)?;
    let mask: Vec<bool> = (0..len * len).map(|e| e % len <= e / len).collect();
    matmul(&softmax_rows(&scores, Some(&mask))?, v)
}

/// Full-map attention in which query `i` may attend key `j` only when both
/// are selected and `j <= i`. Rows outside `selected` are zero.
pub fn masked_sparse_oracle(q: &Tensor, k: &Tensor, v: &Tensor, selected: &[usize]) -> Result<Tensor> {
    let (len, _) = check_head(q, k, v)?;
    validate_indices(selected, len)?;
    let mut in_set = vec![false; len];
    for &i in selected {
        in_set[i] = true;
    }
    let scores = scaled_scores(q, k)?;
    // Unselected query rows get a placeholder mask (their own diagonal) so
    // the softmax stays defined; they are zeroed afterwards.
    let mask: Vec<bool> = (0..len * len)
        .map(|e| {
            let (i, j) = (e / len, e % len);
            if in_set[i] {
                in_set[j] && j <= i
            } else {
                i == j
            }
        })
        .collect();
    let mut probs = softmax_rows(&scores, Some(&mask))?;
    for i in (0..len).filter(|&i| !in_set[i]) {
        probs.row_mut(i).fill(0.0);
    }
    let mut out = matmul(&probs, v)?;
    for i in (0..len).filter(|&i| !in_set[i]) {
        out.row_mut(i).fill(0.0);
    }
    Ok(out)
}

/// Dense causal attention for every query head, `[H, L, d]`.
pub fn dense_attention_heads(heads: &HeadTensors) -> Result<Tensor> {
    let outs = (0..heads.n_heads())
        .map(|h| dense_causal_attention(&heads.query(h), &heads.key(h), &heads.value(h)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

/// Compress → attend → decompress, independently per query head.
///
/// Selections are strictly ascending, so the plain lower-triangular mask the
/// backend applies in compressed coordinates is the original causal order.
/// Rows a head did not select are exactly `0.0` in that head's output.
pub fn token_sparse_attention<B: AttentionBackend + ?Sized>(
    heads: &HeadTensors,
    selection: &TokenSelection,
    backend: &B,
) -> Result<Tensor> {
    let len = heads.seq_len();
    selection.validate(heads.n_heads(), len)?;
    let mut outs = Vec::with_capacity(heads.n_heads());
    for (h, idx) in selection.per_head.iter().enumerate() {
        let q = gather_rows(&heads.query(h), idx)?;
        let k = gather_rows(&heads.key(h), idx)?;
        let v = gather_rows(&heads.value(h), idx)?;
        let compressed = backend.attend(&q, &k, &v)?;
        outs.push(scatter_rows(&compressed, idx, len)?);
    }
    Tensor::stack(&outs)
}
