//! Dense, dynamic and fixed-ratio prefill on the toy decoder.

use token_sparse::bench::{random_tokens, relative_l2};
use token_sparse::{calibrate, Model, ModelConfig, SparsePlan};

fn main() -> token_sparse::Result<()> {
    let model = Model::init_random(ModelConfig::default(), 7)?;
    let tokens = random_tokens(7, 0, 192, model.config.vocab_size);
    let layers = calibrate(&model, std::slice::from_ref(&tokens), 1e-6, 0.5)?.sparse_layers;
    println!("sparse layers: {layers:?}");

    let dense = model.forward(&tokens, &SparsePlan::dense())?;
    let plans = [
        ("dynamic tau=0.005", SparsePlan::dynamic(layers.iter().copied(), 0.005)),
        ("dynamic tau=0.1", SparsePlan::dynamic(layers.iter().copied(), 0.1)),
        ("fixed s=0.5", SparsePlan::fixed(layers.iter().copied(), 0.5)),
    ];
    for (name, plan) in plans {
        let out = model.forward(&tokens, &plan)?;
        let budgets: Vec<String> = out
            .stats
            .iter()
            .map(|s| if s.sparse { s.k_keep.to_string() } else { "-".into() })
            .collect();
        println!(
            "{name:<18} k_keep [{}]  logits deviation {:.4}",
            budgets.join(", "),
            relative_l2(&out.logits, &dense.logits)
        );
    }
    Ok(())
}
