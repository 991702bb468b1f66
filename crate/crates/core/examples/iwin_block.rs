//! One multi-scale irregular-window block; zero offsets reproduce regular windows.

use iwin::attention::{AttentionConfig, IwinBlock, OffsetMode};
use iwin::params::{ParamStore, Session};
use iwin::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(mode: OffsetMode, x: &Tensor) -> iwin::Result<Tensor> {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(16, vec![2, 4])?;
    let block = IwinBlock::new(&mut store, "block", &cfg, mode, &mut ChaCha8Rng::seed_from_u64(1))?;
    let mut s = Session::inference(&store);
    let xv = s.constant(x.clone());
    let y = block.forward(&mut s, xv)?;
    Ok(s.value(y).clone())
}

fn main() -> iwin::Result<()> {
    let x = Tensor::from_fn([1, 8, 8, 16], |i| (i as f64 * 0.37).sin());
    let learned = run(OffsetMode::Learned, &x)?;
    let regular = run(OffsetMode::Regular, &x)?;
    println!("output shape {:?}", learned.shape());
    println!("freshly initialised offsets are zero, so both agree: {}", learned == regular);
    Ok(())
}
