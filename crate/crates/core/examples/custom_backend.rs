//! Plugging a different inner kernel into token-sparse attention.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use token_sparse::coverage::{select_for_layer, BudgetRule, CoverageParams};
use token_sparse::{dense_causal_attention, token_sparse_attention, AttentionBackend, HeadTensors, Tensor};

/// Delegates to the dense kernel and records the compressed shapes it saw.
#[derive(Default)]
struct Recording {
    calls: RefCell<Vec<usize>>,
}

impl AttentionBackend for Recording {
    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> token_sparse::Result<Tensor> {
        self.calls.borrow_mut().push(q.rows());
        dense_causal_attention(q, k, v)
    }
}

fn main() -> token_sparse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let heads = HeadTensors::new(
        Tensor::randn(&[4, 96, 16], 2.0, &mut rng),
        Tensor::randn(&[4, 96, 16], 2.0, &mut rng),
        Tensor::randn(&[4, 96, 16], 1.0, &mut rng),
    )?;
    let sel = select_for_layer(&heads, BudgetRule::Coverage(0.2), &CoverageParams::default())?;

    let backend = Recording::default();
    let a = token_sparse_attention(&heads, &sel, &backend)?;
    println!("backend saw {:?} rows per head (L = 96)", backend.calls.borrow());

    // Closures work too.
    let b = token_sparse_attention(&heads, &sel, &|q: &Tensor, k: &Tensor, v: &Tensor| dense_causal_attention(q, k, v))?;
    println!("closure backend max difference: {}", a.max_abs_diff(&b)?);
    Ok(())
}
