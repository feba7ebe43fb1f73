//! Scoring, coverage budgets and per-head selection across thresholds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use token_sparse::coverage::{select_for_layer, BudgetRule, CoverageParams};
use token_sparse::flops::map_sparsity;
use token_sparse::{aggregate_scores, coverage_budget, score_tokens, HeadTensors, Tensor};

fn main() -> token_sparse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let len = 128;
    let heads = HeadTensors::new(
        Tensor::randn(&[8, len, 16], 2.0, &mut rng),
        Tensor::randn(&[2, len, 16], 2.0, &mut rng),
        Tensor::randn(&[2, len, 16], 1.0, &mut rng),
    )?;

    let params = CoverageParams::default();
    let scores = score_tokens(&heads, params.last_q, params.kernel)?;
    let layer = aggregate_scores(&scores)?;
    println!("tau      k_keep  map_sparsity");
    for tau in [0.0, 0.005, 0.01, 0.05, 0.1, 0.3, 0.9, 1.0] {
        let k = coverage_budget(&layer, tau, 1)?;
        println!("{tau:<8} {k:>6}  {:.4}", map_sparsity(k, len));
    }

    let sel = select_for_layer(&heads, BudgetRule::Coverage(0.1), &params)?;
    println!("\ntau=0.1 keeps {} of {len} tokens per head", sel.k_keep);
    for (h, idx) in sel.per_head.iter().enumerate().take(3) {
        println!("head {h}: first kept {:?}", &idx[..8.min(idx.len())]);
    }
    let fixed = select_for_layer(&heads, BudgetRule::Fixed(0.5), &params)?;
    println!("fixed s=0.5 keeps {}", fixed.k_keep);
    Ok(())
}
