//! Save a random model, load it back and confirm identical logits.

use token_sparse::model::{load_checkpoint, save_checkpoint};
use token_sparse::{Model, ModelConfig, SparsePlan};

fn main() -> token_sparse::Result<()> {
    let model = Model::init_random(ModelConfig::default(), 42)?;
    let path = std::env::temp_dir().join("token_sparse_example.tsa");
    save_checkpoint(&model, &path)?;
    let size = std::fs::metadata(&path)?.len();
    let loaded = load_checkpoint(&path)?;

    let tokens: Vec<u32> = (0..32).collect();
    let a = model.forward(&tokens, &SparsePlan::dense())?;
    let b = loaded.forward(&tokens, &SparsePlan::dense())?;
    println!("{} ({size} bytes)", path.display());
    println!("weights equal: {}", model == loaded);
    println!("max logit difference: {}", a.logits.max_abs_diff(&b.logits)?);
    std::fs::remove_file(&path)?;
    Ok(())
}
