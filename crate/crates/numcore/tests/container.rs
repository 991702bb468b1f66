use numcore::{checkpoint, Tensor};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, n)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn round_trip_is_bit_exact(
        records in prop::collection::vec(("[a-z./_0-9]{0,12}", tensor_strategy()), 0..5)
    ) {
        let refs: Vec<(&str, &Tensor)> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        checkpoint::write(&mut buf, &refs).unwrap();
        let back = checkpoint::read(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for ((n0, t0), (n1, t1)) in records.iter().zip(&back) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(t0.shape(), t1.shape());
            let a: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    let t = Tensor::from_fn([2, 3], |i| i as f64 / 7.0);
    checkpoint::save(&path, &[("layer.w", &t), ("empty", &Tensor::zeros([0]))]).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back[0].0, "layer.w");
    assert_eq!(back[0].1, t);
    assert_eq!(back[1].1.shape(), &[0]);
}
