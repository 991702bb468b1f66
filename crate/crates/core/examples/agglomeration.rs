//! Token agglomeration: four tokens per 2×2 window fused to one of twice the width.

use iwin::agglomerate::{agglomerate, plan_stages};
use iwin::{Graph, Tensor};

fn main() -> iwin::Result<()> {
    let mut g = Graph::new();
    let z = g.constant(Tensor::from_fn([1, 4, 4, 1], |i| i as f64));
    let w = g.constant(Tensor::full([2, 4], 0.25));
    let offsets = g.constant(Tensor::from_fn([1, 4, 4, 2], |i| if i % 2 == 0 { 0.5 } else { 0.0 }));
    let out = agglomerate(&mut g, z, Some(offsets), w)?;
    println!("4×4×1 -> {:?}", g.shape(out));
    println!("values {:?}", g.value(out).data());

    for p in plan_stages(64, 64, 32)? {
        println!(
            "stage {}: {:?} tokens of {} -> {:?} tokens of {}",
            p.stage, p.tokens_in, p.input_dim, p.tokens_out, p.output_dim
        );
    }
    Ok(())
}
