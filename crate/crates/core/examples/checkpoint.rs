//! Saving and restoring a model with its run configuration.

use iwin::harness::config::RunConfig;
use iwin::harness::train::{load_checkpoint, save_checkpoint};
use iwin::model::Model;

fn main() -> iwin::Result<()> {
    let cfg = RunConfig::default();
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let path = std::env::temp_dir().join("iwin_example.ckpt");
    save_checkpoint(&path, &model.store, &cfg)?;
    let (back, back_cfg) = load_checkpoint(&path)?;
    println!("{} parameters in {} tensors", back.num_parameters(), back.store.len());
    println!("restored configuration matches: {}", back_cfg == cfg);
    println!("restored weights match: {}", back.store.records() == model.store.records());
    Ok(())
}
