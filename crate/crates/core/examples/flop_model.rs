//! The analytic cost model: speedup against budget and sequence length.

use token_sparse::{estimate_flops, AttentionShape};

fn main() {
    println!("seq_len  keep  map_sparsity  speedup  overhead_share");
    for seq_len in [1024, 4096, 16384, 65536] {
        for keep in [1.0, 0.75, 0.5, 0.25] {
            let shape = AttentionShape {
                seq_len,
                d_head: 128,
                n_heads: 32,
                last_q: 64,
                kernel: 7,
            };
            let k = ((seq_len as f64) * keep).round() as usize;
            // Half of 32 layers sparse.
            let budgets: Vec<Option<usize>> = (0..32).map(|l| (l % 2 == 0).then_some(k)).collect();
            let r = estimate_flops(&shape, &budgets);
            println!(
                "{seq_len:>7}  {keep:>4}  {:>12.4}  {:>7.3}  {:>14.4}",
                r.avg_map_sparsity, r.est_speedup, r.overhead_fraction
            );
        }
    }
}
