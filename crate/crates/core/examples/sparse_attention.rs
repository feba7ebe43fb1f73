//! Token-sparse attention on one layer's heads, checked against the
//! hard-masked oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use token_sparse::{masked_sparse_oracle, token_sparse_attention, DenseCausal, HeadTensors, Tensor, TokenSelection};

fn main() -> token_sparse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (heads, kv_heads, len, d) = (4, 2, 12, 8);
    let qkv = HeadTensors::new(
        Tensor::randn(&[heads, len, d], 1.0, &mut rng),
        Tensor::randn(&[kv_heads, len, d], 1.0, &mut rng),
        Tensor::randn(&[kv_heads, len, d], 1.0, &mut rng),
    )?;

    // Each head keeps its own six tokens; all keep the last one.
    let selection = TokenSelection {
        tau: None,
        k_keep: 6,
        per_head: vec![
            vec![0, 1, 2, 3, 4, 11],
            vec![0, 2, 4, 6, 8, 11],
            vec![5, 6, 7, 8, 9, 11],
            vec![1, 3, 5, 7, 9, 11],
        ],
        forced: vec![11],
    };
    selection.validate(heads, len)?;

    let out = token_sparse_attention(&qkv, &selection, &DenseCausal)?;
    for h in 0..heads {
        let oracle = masked_sparse_oracle(&qkv.query(h), &qkv.key(h), &qkv.value(h), &selection.per_head[h])?;
        let err = out.slice_outer(h).max_abs_diff(&oracle)?;
        let zero_rows = (0..len).filter(|&t| out.slice_outer(h).row(t).iter().all(|&x| x == 0.0)).count();
        println!("head {h}: kept {:?}, zero rows {zero_rows}, max |fast - oracle| = {err:.2e}", selection.per_head[h]);
    }
    Ok(())
}
