use iwin::sampler::{bilinear_gather, bilinear_sample, kernel_k, taps, SamplePoint};
use iwin::{FeatureMap, Graph, Tensor};
use numcore::{grad_check_many, GradCheckOptions};
use proptest::prelude::*;

/// Direct double sum over every grid cell.
fn dense_sample(z: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; z.channels()];
    for qy in 0..z.height() {
        for qx in 0..z.width() {
            let k = kernel_k(qx as f64, x) * kernel_k(qy as f64, y);
            for (c, o) in out.iter_mut().enumerate() {
                *o += k * z.get(c, qy, qx);
            }
        }
    }
    out
}

fn corner_map() -> FeatureMap {
    FeatureMap::from_fn(1, 2, 2, |_, y, x| (2 * y + x) as f64)
}

#[test]
fn kernel_examples() {
    assert_eq!(kernel_k(1.0, 1.0), 1.0);
    assert_eq!(kernel_k(0.0, 2.0), 0.0);
    assert_eq!(kernel_k(2.0, 1.25), 0.25);
}

#[test]
fn corner_map_examples() {
    let z = corner_map();
    assert_eq!(bilinear_sample(&z, SamplePoint { x: 0.0, y: 0.0 }), [0.0]);
    assert_eq!(bilinear_sample(&z, SamplePoint { x: 0.5, y: 0.5 }), [1.5]);
    assert_eq!(bilinear_sample(&z, SamplePoint { x: 0.5, y: 1.0 }), [2.5]);
}

#[test]
fn outside_the_map_reads_zero() {
    let z = FeatureMap::from_fn(2, 3, 3, |_, _, _| 1.0);
    assert_eq!(bilinear_sample(&z, SamplePoint { x: -1.0, y: 1.0 }), [0.0, 0.0]);
    assert_eq!(bilinear_sample(&z, SamplePoint { x: 1.0, y: 3.5 }), [0.0, 0.0]);
    // half of the kernel mass falls outside
    assert_eq!(bilinear_sample(&z, SamplePoint { x: -0.5, y: 1.0 }), [0.5, 0.5]);
}

#[test]
fn integer_points_copy_features_exactly() {
    let z = FeatureMap::from_fn(3, 4, 5, |c, y, x| ((c * 7 + y * 3 + x) as f64).sin());
    for y in 0..4 {
        for x in 0..5 {
            let got = bilinear_sample(
                &z,
                SamplePoint {
                    x: x as f64,
                    y: y as f64,
                },
            );
            assert_eq!(got, z.token(y, x));
        }
    }
}

proptest! {
    #[test]
    fn partition_of_unity(x in 0.0f64..4.0, y in 0.0f64..3.0) {
        let total: f64 = taps(x, y, 4, 5).map(|(_, w)| w).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(taps(x, y, 4, 5).count() <= 4);
    }

    #[test]
    fn constant_maps_sample_to_the_constant(x in 0.0f64..4.0, y in 0.0f64..3.0, c in -5.0f64..5.0) {
        let z = FeatureMap::from_fn(2, 4, 5, |_, _, _| c);
        for v in bilinear_sample(&z, SamplePoint { x, y }) {
            prop_assert!((v - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn affine_maps_are_reproduced(
        x in 0.0f64..5.0, y in 0.0f64..4.0,
        a in -3.0f64..3.0, b in -3.0f64..3.0, g in -3.0f64..3.0,
    ) {
        let z = FeatureMap::from_fn(1, 5, 6, |_, qy, qx| a * qx as f64 + b * qy as f64 + g);
        let v = bilinear_sample(&z, SamplePoint { x, y })[0];
        prop_assert!((v - (a * x + b * y + g)).abs() <= 1e-10);
    }

    #[test]
    fn matches_the_dense_sum(x in -1.5f64..5.5, y in -1.5f64..4.5, seed in 0u64..1000) {
        let z = FeatureMap::from_fn(2, 4, 5, |c, qy, qx| ((seed + (c * 31 + qy * 7 + qx) as u64) as f64 * 0.37).sin());
        let got = bilinear_sample(&z, SamplePoint { x, y });
        let want = dense_sample(&z, x, y);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn gather_gradients_match_finite_differences() {
    // points at least 1e-3 away from integer coordinates
    let z = Tensor::from_fn([2, 3, 4, 2], |i| ((i * 13 % 17) as f64 * 0.21).cos());
    let pts = Tensor::new([6, 2], vec![0.3, 0.7, 1.25, 2.6, 2.9, 0.45, 0.61, 1.33, 3.4, 1.8, -0.35, 0.5]).unwrap();
    let weights = Tensor::from_fn([6, 2], |i| 1.0 + 0.1 * i as f64);
    let err = grad_check_many(
        |g: &mut Graph, v| {
            let s = bilinear_gather(g, v[0], v[1]).map_err(|e| numcore::Error::Contract(e.to_string()))?;
            let w = g.constant(weights.clone());
            let p = g.mul(s, w)?;
            Ok(g.sum(p))
        },
        &[z, pts],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn gather_rows_follow_the_batch() {
    let z = Tensor::from_fn([2, 2, 2, 1], |i| i as f64);
    let mut g = Graph::new();
    let zv = g.constant(z);
    let p = g.constant(Tensor::new([4, 2], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap());
    let out = bilinear_gather(&mut g, zv, p).unwrap();
    assert_eq!(g.value(out).data(), [0.0, 3.0, 4.0, 7.0]);
}
