//! Analytic gradients of the bilinear gather against central differences.

use iwin::sampler::bilinear_gather;
use iwin::{Graph, Tensor};
use numcore::{grad_check_many, GradCheckOptions};

fn main() {
    let z = Tensor::from_fn([1, 3, 3, 2], |i| (i as f64 * 0.4).cos());
    let points = Tensor::new([3, 2], vec![0.3, 0.6, 1.7, 1.2, -0.4, 2.3]).expect("shape");
    let err = grad_check_many(
        |g: &mut Graph, v| {
            let s = bilinear_gather(g, v[0], v[1]).map_err(|e| numcore::Error::Contract(e.to_string()))?;
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq))
        },
        &[z, points],
        &GradCheckOptions::default(),
    )
    .expect("finite function");
    println!("max relative error {err:.2e}");
}
