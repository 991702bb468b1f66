//! Bilinear reads at fractional points, with zero extension past the edge.

use iwin::sampler::{bilinear_sample, taps, SamplePoint};
use iwin::FeatureMap;

fn main() {
    let z = FeatureMap::from_fn(1, 2, 2, |_, y, x| (2 * y + x) as f64);
    for (x, y) in [(0.0, 0.0), (0.5, 0.5), (0.5, 1.0), (-0.5, 1.0), (3.0, 0.0)] {
        let v = bilinear_sample(&z, SamplePoint::new(x, y));
        let weights: Vec<String> = taps(x, y, 2, 2).map(|(i, w)| format!("cell {i}: {w}")).collect();
        println!("({x:5}, {y:5}) -> {:6.3}   [{}]", v[0], weights.join(", "));
    }
}
