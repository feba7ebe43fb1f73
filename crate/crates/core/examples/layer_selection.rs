//! Drift calibration on a random toy model and the resulting sparse layers.

use token_sparse::bench::random_tokens;
use token_sparse::{calibrate, select_sparse_layers, Model, ModelConfig};

fn main() -> token_sparse::Result<()> {
    let config = ModelConfig {
        n_layers: 8,
        ..ModelConfig::default()
    };
    let model = Model::init_random(config, 0)?;
    let prompts: Vec<Vec<u32>> = (0..3).map(|p| random_tokens(0, p, 96, model.config.vocab_size)).collect();
    let profile = calibrate(&model, &prompts, 1e-6, 0.5)?;
    print!("{}", profile.to_csv());
    println!("sparse layers at delta=0.5: {:?}", profile.sparse_layers);

    let strict = select_sparse_layers(&profile.drift, 0.25)?;
    println!("sparse layers at delta=0.25: {:?}", strict.sparse_layers);

    let ties = select_sparse_layers(&[0.2; 4], 0.5)?;
    println!("all-equal drift selects {:?}", ties.sparse_layers);
    Ok(())
}
